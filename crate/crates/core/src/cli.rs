//! Command-line driver for the train / estimate / adapt workflow.
//!
//! Every command writes a `resolved_config.txt` (or `<file>.resolved_config.txt`
//! for single-file outputs) describing exactly what it ran with.

use std::fs;
use std::io::Read;
use std::path::{Component, Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    self, adapt_source_free, architecture, compute_bound_diagnostics, diagnostic_pseudo_set,
    emb1_tensor, estimate_prototypes, evaluate_miou, infer, put_iou, summary_kv, train_source,
    write_emb1, write_steps_csv, BoundDiagnostics, ExperimentConfig, SourceSummary,
};
use crate::datasets::{self, DomainSpec, LabeledImages};
use crate::error::{Error, Result};
use crate::gmm::PrototypicalGmm;
use crate::kv::KvMap;
use crate::nn::SegModel;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Adapted checkpoint inside an adapt output directory.
pub const ADAPTED_CKPT: &str = "adapted.mdl1";
/// Rows kept per embedding export.
pub const EXPORT_ROWS: usize = 4096;

#[derive(Parser, Debug)]
#[command(name = "proto-adapt", version, about = "Source-free adaptation through a prototype mixture")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value experiment config; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// worker threads for inference; results do not depend on it
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// overwrite existing outputs
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate source, target-train and target-eval splits
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the segmentation model on labeled source data
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the prototype mixture on confident source embeddings
    Estimate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a checkpoint to unlabeled target data without source access
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-class IoU and mIoU on a labeled split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// also write the scores as key=value text
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the bound diagnostics of an adapt run
    Diagnose {
        #[arg(long)]
        report: PathBuf,
        /// labeled target split; fills in the empirical target errors
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Write EMB1 embedding exports for plotting
    ExportEmbeddings {
        /// adapted checkpoint
        #[arg(long)]
        ckpt: PathBuf,
        /// checkpoint before adaptation
        #[arg(long)]
        pre_ckpt: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { spec, out, force } => cmd_gen_data(&spec, &out, force),
        Command::Train {
            data,
            out,
            steps,
            common,
        } => cmd_train(&data, &out, steps, &common),
        Command::Estimate {
            ckpt,
            data,
            tau,
            out,
            common,
        } => cmd_estimate(&ckpt, &data, tau, &out, &common),
        Command::Adapt {
            ckpt,
            gmm,
            target,
            lambda,
            tau,
            iters,
            out,
            common,
        } => cmd_adapt(&AdaptArgs {
            ckpt,
            gmm,
            target,
            lambda,
            tau,
            iters,
            out,
            common,
        }),
        Command::Eval {
            ckpt,
            data,
            out,
            threads,
        } => cmd_eval(&ckpt, &data, out.as_deref(), threads),
        Command::Diagnose {
            report,
            eval_data,
            threads,
        } => cmd_diagnose(&report, eval_data.as_deref(), threads),
        Command::ExportEmbeddings {
            ckpt,
            pre_ckpt,
            gmm,
            data,
            out,
            common,
        } => cmd_export(&ckpt, &pre_ckpt, &gmm, &data, &out, &common),
    }
}

fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_kv(&KvMap::load(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.threads = common.threads;
    Ok(cfg)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// `<file>.<suffix>` next to `file`.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sidecar_path(gmm: &Path) -> PathBuf {
    sibling(gmm, "manifest.txt")
}

fn ensure_parent(file: &Path) -> Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn guard_file(file: &Path, force: bool) -> Result<()> {
    if file.exists() && !force {
        return Err(Error::Usage(format!(
            "{} exists; pass --force to overwrite",
            file.display()
        )));
    }
    ensure_parent(file)
}

fn guard_dir(dir: &Path, force: bool) -> Result<()> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A split directory, or a dataset root whose `default` split is used.
pub fn resolve_split(dir: &Path, default: &str) -> Result<PathBuf> {
    if dir.join(datasets::IMAGES).exists() {
        return Ok(dir.to_path_buf());
    }
    let sub = dir.join(default);
    if sub.join(datasets::IMAGES).exists() {
        return Ok(sub);
    }
    Err(Error::Usage(format!("{} holds no {} split", dir.display(), default)))
}

fn num_classes(split: &Path) -> Result<usize> {
    datasets::read_manifest(split)?.required("classes")
}

fn require_labels(split: &Path) -> Result<LabeledImages> {
    if !datasets::has_labels(split) {
        return Err(Error::Usage(format!("{} has no labels", split.display())));
    }
    datasets::load_labeled(split)
}

/// SHA-256 of a split's image file, hex encoded.
pub fn fingerprint_split(split: &Path) -> Result<String> {
    let p = split.join(datasets::IMAGES);
    let mut f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(&p, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Absolute, lexically normalized path; works for paths that no longer exist.
fn absolute(p: &Path) -> Result<PathBuf> {
    if let Ok(c) = fs::canonicalize(p) {
        return Ok(c);
    }
    let base = if p.is_absolute() {
        PathBuf::new()
    } else {
        std::env::current_dir().map_err(|e| Error::io(".", e))?
    };
    let mut out = PathBuf::new();
    for c in base.join(p).components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Refuse `target` when it overlaps the source split recorded at
/// estimation time, by path or by content.
pub fn check_source_free(target: &Path, sidecar: &KvMap) -> Result<()> {
    let t = absolute(target)?;
    if let Some(src) = sidecar.get("source_dir") {
        let s = PathBuf::from(src);
        if t.starts_with(&s) || s.starts_with(&t) {
            return Err(Error::SourceForbidden(target.to_path_buf()));
        }
    }
    if let (Some(fp), Ok(split)) = (
        sidecar.get("source_fingerprint"),
        resolve_split(target, datasets::TARGET_TRAIN_SPLIT),
    ) {
        if fingerprint_split(&split)? == fp {
            return Err(Error::SourceForbidden(target.to_path_buf()));
        }
    }
    Ok(())
}

fn cmd_gen_data(spec_path: &Path, out: &Path, force: bool) -> Result<()> {
    let spec = DomainSpec::from_kv(&KvMap::load(spec_path)?)?;
    guard_dir(out, force)?;
    for split in [
        datasets::SOURCE_SPLIT,
        datasets::TARGET_TRAIN_SPLIT,
        datasets::TARGET_EVAL_SPLIT,
    ] {
        let d = out.join(split);
        if d.exists() {
            fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let dirs = datasets::write_splits(out, &spec)?;
    spec.to_kv().save(&out.join(adaptation::RESOLVED_CONFIG))?;
    println!(
        "kind={} classes={} size={}x{} train={} eval={} seed={}",
        spec.kind, spec.num_classes, spec.height, spec.width, spec.n_train, spec.n_eval, spec.seed
    );
    for d in dirs {
        println!("wrote {}", d.display());
    }
    Ok(())
}

fn cmd_train(data: &Path, out: &Path, steps: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(s) = steps {
        cfg.source_steps = s;
    }
    let split = resolve_split(data, datasets::SOURCE_SPLIT)?;
    cfg.dataset = display(&split);
    let k = num_classes(&split)?;
    let source = require_labels(&split)?;
    guard_file(out, common.force)?;
    let arch = architecture(&cfg, source.images.shape()[3], k);
    let run = train_source(&cfg, &arch, &source)?;
    run.model.save(out)?;
    let mut log = String::from("step,loss\n");
    for (i, l) in run.losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    write_file(&sibling(out, "train_log.csv"), log.as_bytes())?;
    cfg.to_kv().save(&sibling(out, adaptation::RESOLVED_CONFIG))?;
    match run.final_loss() {
        Some(l) => println!("trained {} steps, final loss {l:.6}", cfg.source_steps),
        None => println!("wrote initialized model (0 steps)"),
    }
    Ok(())
}

fn cmd_estimate(ckpt: &Path, data: &Path, tau: Option<f64>, out: &Path, common: &Common) -> Result<()> {
    let mut cfg = resolve_config(common)?;
    if let Some(t) = tau {
        cfg.tau_fit = t;
    }
    cfg.validate()?;
    let split = resolve_split(data, datasets::SOURCE_SPLIT)?;
    cfg.dataset = display(&split);
    let model = SegModel::<f32>::load(ckpt)?;
    let source = require_labels(&split)?;
    guard_file(out, common.force)?;
    let (gmm, summary) = estimate_prototypes(&cfg, &model, &source)?;
    gmm.save(out)?;
    let mut side = KvMap::new();
    side.set("source_dir", display(&absolute(&split)?));
    side.set("source_fingerprint", fingerprint_split(&split)?);
    side.set("ckpt", display(&absolute(ckpt)?));
    side.set("tau_fit", cfg.tau_fit);
    side.set("tau_filter", cfg.tau_filter);
    side.set("alpha", crate::kv::join_f64(&gmm.alpha));
    summary.write_kv(&mut side);
    side.save(&sidecar_path(out))?;
    cfg.to_kv().save(&sibling(out, adaptation::RESOLVED_CONFIG))?;
    println!(
        "fitted {} components in {} dims; w_sp exact {:.4} (+/- {:.4}) sliced {:.4}",
        gmm.num_classes(),
        gmm.dim(),
        summary.w_sp.exact,
        summary.w_sp.exact_stderr,
        summary.w_sp.sliced
    );
    Ok(())
}

struct AdaptArgs {
    ckpt: PathBuf,
    gmm: PathBuf,
    target: PathBuf,
    lambda: Option<f64>,
    tau: Option<f64>,
    iters: Option<usize>,
    out: PathBuf,
    common: Common,
}

fn cmd_adapt(a: &AdaptArgs) -> Result<()> {
    let side = KvMap::load(&sidecar_path(&a.gmm))?;
    check_source_free(&a.target, &side)?;
    let split = resolve_split(&a.target, datasets::TARGET_TRAIN_SPLIT)?;
    if datasets::has_labels(&split) {
        return Err(Error::Usage(format!(
            "{} holds labels; adaptation takes an unlabeled split",
            split.display()
        )));
    }
    let mut cfg = resolve_config(&a.common)?;
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(t) = a.tau {
        cfg.tau_filter = t;
    }
    if let Some(i) = a.iters {
        cfg.adapt_steps = i;
    }
    cfg.dataset = display(&split);
    cfg.validate()?;
    let model = SegModel::<f32>::load(&a.ckpt)?;
    let gmm = PrototypicalGmm::load(&a.gmm)?;
    let images = datasets::load_images(&split)?;
    guard_dir(&a.out, a.common.force)?;

    let (adapted, report) = adapt_source_free(&model, &gmm, &images, &cfg)?;
    adapted.save(&a.out.join(ADAPTED_CKPT))?;
    write_steps_csv(&a.out.join(adaptation::STEPS_CSV), &report.records)?;

    let source = SourceSummary::from_kv(&side)?;
    let pseudo = diagnostic_pseudo_set(&cfg, &gmm, &model)?;
    let pre = infer(&model, &images, cfg.threads)?;
    let post = infer(&adapted, &images, cfg.threads)?;
    let diag = compute_bound_diagnostics(
        &source,
        &pseudo.z,
        &pre.embeddings,
        Some(&post.embeddings),
        cfg.tau_filter,
        cfg.num_projections,
        cfg.seed,
    )?;
    diag.to_kv().save(&a.out.join(adaptation::DIAGNOSTICS))?;
    summary_kv(&report).save(&a.out.join(adaptation::SUMMARY))?;
    write_exports(&a.out, &pseudo.z, &pseudo.labels, &pre, &post, None, cfg.seed)?;

    let mut resolved = cfg.to_kv();
    resolved.set("ckpt", display(&absolute(&a.ckpt)?));
    resolved.set("gmm", display(&absolute(&a.gmm)?));
    resolved.save(&a.out.join(adaptation::RESOLVED_CONFIG))?;
    if let Some(last) = report.records.last() {
        println!(
            "adapted {} steps: ce {:.5} swd {:.5} total {:.5}, kept fraction {:.4}",
            report.records.len(),
            last.ce,
            last.swd,
            last.total,
            report.kept_fraction
        );
    }
    print_diagnostics(&diag);
    Ok(())
}

/// Rows exported from `n` pixels: all of them, or a seeded subsample.
fn export_rows(n: usize, seed: u64) -> Vec<usize> {
    if n <= EXPORT_ROWS {
        return (0..n).collect();
    }
    let mut idx = Rng::new(seed).sample_without_replacement(n, EXPORT_ROWS);
    idx.sort_unstable();
    idx
}

fn write_exports(
    out: &Path,
    pseudo_z: &Tensor<f32>,
    pseudo_labels: &[usize],
    pre: &adaptation::Inference,
    post: &adaptation::Inference,
    truth: Option<&[usize]>,
    seed: u64,
) -> Result<()> {
    let g = emb1_tensor(pseudo_z, Some(pseudo_labels), pseudo_labels)?;
    write_emb1(&out.join(adaptation::EMB_GMM), &g)?;
    let rows = export_rows(pre.embeddings.rows(), seed);
    let pick = |v: &[usize]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let t = truth.map(pick);
    for (name, inf) in [(adaptation::EMB_TARGET_PRE, pre), (adaptation::EMB_TARGET_POST, post)] {
        let e = emb1_tensor(&inf.embeddings.select_rows(&rows), t.as_deref(), &pick(&inf.predictions))?;
        write_emb1(&out.join(name), &e)?;
    }
    Ok(())
}

fn print_diagnostics(d: &BoundDiagnostics) {
    let show = |name: &str, e: &adaptation::DistanceEstimate| {
        println!(
            "{name}: exact {:.5} (+/- {:.5}, m<={}, {} resamples)  sliced {:.5}",
            e.exact,
            e.exact_stderr,
            adaptation::EXACT_POINTS,
            adaptation::EXACT_RESAMPLES,
            e.sliced
        );
    };
    show("w_sp", &d.w_sp);
    show("w_tp_pre", &d.w_tp_pre);
    if let Some(e) = &d.w_tp_post {
        show("w_tp_post", e);
    }
    println!("one_minus_tau: {:.6}", d.one_minus_tau);
    for (k, v) in [
        ("e_source", d.e_source),
        ("e_target_pre", d.e_target_pre),
        ("e_target_post", d.e_target_post),
    ] {
        match v {
            Some(v) => println!("{k}: {v:.5}"),
            None => println!("{k}: unavailable"),
        }
    }
    println!("N={} M={} N_p={}", d.n, d.m, d.n_p);
}

fn cmd_eval(ckpt: &Path, data: &Path, out: Option<&Path>, threads: usize) -> Result<()> {
    let split = resolve_split(data, datasets::TARGET_EVAL_SPLIT)?;
    let model = SegModel::<f32>::load(ckpt)?;
    let labeled = require_labels(&split)?;
    let r = evaluate_miou(&model, &labeled, threads)?;
    for (c, v) in r.per_class.iter().enumerate() {
        match v {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: IoU undefined"),
        }
    }
    println!("mIoU {:.4}  pixel accuracy {:.4}", r.miou, r.pixel_accuracy);
    if let Some(out) = out {
        ensure_parent(out)?;
        let mut kv = KvMap::new();
        kv.set("ckpt", display(ckpt));
        kv.set("data", display(&split));
        put_iou(&mut kv, "eval", &r);
        kv.save(out)?;
    }
    Ok(())
}

fn cmd_diagnose(report: &Path, eval_data: Option<&Path>, threads: usize) -> Result<()> {
    let diag_path = report.join(adaptation::DIAGNOSTICS);
    let mut diag = BoundDiagnostics::from_kv(&KvMap::load(&diag_path)?)?;
    if let Some(data) = eval_data {
        let split = resolve_split(data, datasets::TARGET_EVAL_SPLIT)?;
        let labeled = require_labels(&split)?;
        let resolved = KvMap::load(&report.join(adaptation::RESOLVED_CONFIG))?;
        let pre_path: PathBuf = resolved.required::<String>("ckpt")?.into();
        let pre = evaluate_miou(&SegModel::<f32>::load(&pre_path)?, &labeled, threads)?;
        let post = evaluate_miou(&SegModel::<f32>::load(&report.join(ADAPTED_CKPT))?, &labeled, threads)?;
        diag.e_target_pre = Some(pre.error_rate());
        diag.e_target_post = Some(post.error_rate());
        diag.to_kv().save(&diag_path)?;
        let summary_path = report.join(adaptation::SUMMARY);
        let mut summary = KvMap::load(&summary_path)?;
        put_iou(&mut summary, "pre", &pre);
        put_iou(&mut summary, "post", &post);
        summary.save(&summary_path)?;
        println!("mIoU pre {:.4} post {:.4}", pre.miou, post.miou);
    }
    print_diagnostics(&diag);
    if !diag.is_sane() {
        return Err(Error::NonFinite("bound diagnostics"));
    }
    Ok(())
}

fn cmd_export(
    ckpt: &Path,
    pre_ckpt: &Path,
    gmm_path: &Path,
    data: &Path,
    out: &Path,
    common: &Common,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let split = resolve_split(data, datasets::TARGET_EVAL_SPLIT)?;
    let post_model = SegModel::<f32>::load(ckpt)?;
    let pre_model = SegModel::<f32>::load(pre_ckpt)?;
    let gmm = PrototypicalGmm::load(gmm_path)?;
    let images = datasets::load_images(&split)?;
    let truth = if datasets::has_labels(&split) {
        Some(datasets::load_labels(&split)?)
    } else {
        None
    };
    guard_dir(out, common.force)?;
    let pseudo = diagnostic_pseudo_set(&cfg, &gmm, &pre_model)?;
    let pre = infer(&pre_model, &images, cfg.threads)?;
    let post = infer(&post_model, &images, cfg.threads)?;
    write_exports(out, &pseudo.z, &pseudo.labels, &pre, &post, truth.as_deref(), cfg.seed)?;
    let mut resolved = cfg.to_kv();
    resolved.set("ckpt", display(ckpt));
    resolved.set("pre_ckpt", display(pre_ckpt));
    resolved.set("gmm", display(gmm_path));
    resolved.set("data", display(&split));
    resolved.save(&out.join(adaptation::RESOLVED_CONFIG))?;
    for name in [adaptation::EMB_GMM, adaptation::EMB_TARGET_PRE, adaptation::EMB_TARGET_POST] {
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}
