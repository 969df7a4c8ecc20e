use crate::autodiff::softmax_rows;
use crate::datasets::LabeledImages;
use crate::error::{Error, Result};
use crate::nn::{argmax_rows, SegModel};
use crate::tensor::Tensor;

/// Images per forward chunk during inference.
const CHUNK_IMAGES: usize = 32;

/// Per-pixel inference output for a stack of images.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[pixels x embed_dim]`
    pub embeddings: Tensor<f32>,
    pub predictions: Vec<usize>,
    pub confidence: Vec<f32>,
    /// `[pixels x K]`
    pub probs: Tensor<f32>,
}

/// Embeddings, probabilities and argmax labels for every pixel of
/// `images` `[N,H,W,C]`. Chunks are independent, so the result does not
/// depend on `threads`.
pub fn infer(model: &SegModel<f32>, images: &Tensor<f32>, threads: usize) -> Result<Inference> {
    let n = images.shape().first().copied().unwrap_or(0);
    if images.rank() != 4 || n == 0 {
        return Err(Error::dim("infer", format!("images {:?}", images.shape())));
    }
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK_IMAGES)
        .map(<[usize]>::to_vec)
        .collect();
    type Part = Result<(Tensor<f32>, Tensor<f32>)>;
    let run = |idx: &[usize]| -> Part {
        let batch = images.select_rows(idx);
        let z = model.embed_features(&model.features(&batch)?)?;
        let p = softmax_rows(&model.logits(&z)?);
        Ok((z, p))
    };
    let threads = threads.max(1).min(chunks.len());
    let mut parts: Vec<Option<Part>> = (0..chunks.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, c) in parts.iter_mut().zip(&chunks) {
            *slot = Some(run(c));
        }
    } else {
        let per = chunks.len().div_ceil(threads);
        std::thread::scope(|s| {
            for (slots, cs) in parts.chunks_mut(per).zip(chunks.chunks(per)) {
                let run = &run;
                s.spawn(move || {
                    for (slot, c) in slots.iter_mut().zip(cs) {
                        *slot = Some(run(c));
                    }
                });
            }
        });
    }
    let (mut z_all, mut p_all) = (Vec::new(), Vec::new());
    let (d, k) = (model.embed_dim(), model.num_classes());
    for part in parts {
        let (z, p) = part.expect("every chunk ran")?;
        z_all.extend_from_slice(z.data());
        p_all.extend_from_slice(p.data());
    }
    let rows = z_all.len() / d;
    let probs = Tensor::from_parts(vec![rows, k], p_all)?;
    let (predictions, confidence) = argmax_rows(&probs).into_iter().unzip();
    Ok(Inference {
        embeddings: Tensor::from_parts(vec![rows, d], z_all)?,
        predictions,
        confidence,
        probs,
    })
}

/// Intersection over union per class and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth
    pub per_class: Vec<Option<f64>>,
    /// mean over defined classes, in `[0, 1]`
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// row = truth, column = prediction
    pub confusion: Vec<u64>,
}

impl IouReport {
    pub fn error_rate(&self) -> f64 {
        1.0 - self.pixel_accuracy
    }
}

pub fn confusion_matrix(pred: &[usize], truth: &[usize], k: usize) -> Result<Vec<u64>> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "confusion_matrix",
            format!("{} predictions, {} labels", pred.len(), truth.len()),
        ));
    }
    let mut m = vec![0u64; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::dim("confusion_matrix", format!("label {} >= {k}", p.max(t))));
        }
        m[t * k + p] += 1;
    }
    Ok(m)
}

pub fn iou_from_confusion(confusion: &[u64], k: usize) -> IouReport {
    let mut per_class = Vec::with_capacity(k);
    let mut correct = 0u64;
    for c in 0..k {
        let tp = confusion[c * k + c];
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| confusion[c * k + p]).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| confusion[t * k + c]).sum();
        correct += tp;
        let denom = tp + fp + fn_;
        per_class.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let total: u64 = confusion.iter().sum();
    IouReport {
        per_class,
        miou,
        pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        confusion: confusion.to_vec(),
    }
}

pub fn miou_from_predictions(pred: &[usize], truth: &[usize], k: usize) -> Result<IouReport> {
    Ok(iou_from_confusion(&confusion_matrix(pred, truth, k)?, k))
}

/// Pixelwise IoU of `model` on labeled images.
pub fn evaluate_miou(model: &SegModel<f32>, data: &LabeledImages, threads: usize) -> Result<IouReport> {
    let inf = infer(model, &data.images, threads)?;
    miou_from_predictions(&inf.predictions, &data.labels, model.num_classes())
}
