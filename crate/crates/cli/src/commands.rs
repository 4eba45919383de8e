use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sbmt_core::config::RunConfig;
use sbmt_core::costing::{cost_csv, density_csv, flops_attention, instrument_forward, FLOP_CONVENTION};
use sbmt_core::duplicate_task::{generate_batch, parse_sequences, to_dump_string, LabeledBatch, TaskConfig, PAD_TOKEN};
use sbmt_core::encoder::{
    evaluate, gradcheck_model, load_checkpoint, model_forward, save_checkpoint, train_loop, EncoderModel,
    ForwardContext, MaskPlan, ModelConfig, OptimizerState, TrainMetrics,
};
use sbmt_core::rng::{purpose, substream};
use sbmt_core::sbm_attention::{head_forward, HeadForwardOptions};
use sbmt_core::sbm_sampler::EdgeMask;
use sbmt_core::theory::{build_patterns, verify_assumption1};

use crate::manifest::{config_hash, load_config, run_dir, write_file, LoadedConfig, RunManifest, MANIFEST_FILE};
use crate::{CliError, ConfigArgs, Inject};

fn warn_if_edited(loaded: &LoadedConfig, source: &Path) {
    if !loaded.hash_matches {
        eprintln!(
            "warning: {} records config_hash {} but its settings hash to {}; proceeding with the settings",
            source.display(),
            loaded.recorded_hash.as_deref().unwrap_or("?"),
            loaded.base_hash
        );
    }
}

fn load(args: &ConfigArgs, extra: &[(String, String)]) -> Result<LoadedConfig, CliError> {
    let mut overrides = extra.to_vec();
    overrides.extend(args.all_overrides());
    let loaded = load_config(args.config.as_deref(), &overrides)?;
    if let Some(p) = &args.config {
        warn_if_edited(&loaded, p);
    }
    Ok(loaded)
}

/// Held-out batches, disjoint from the training stream.
fn eval_batches(cfg: &RunConfig) -> Result<Vec<LabeledBatch>, CliError> {
    let task = cfg.task_config()?;
    Ok((0..cfg.eval_batches as u64)
        .map(|b| generate_batch(&task, &mut substream(task.seed, &[purpose::EVAL_DATA, b])))
        .collect())
}

fn eval_summary(m: &sbmt_core::encoder::EvalMetrics) -> String {
    format!(
        "loss = {}\naccuracy = {}\npositions = {}\nmean_density = {}\n",
        m.loss, m.accuracy, m.count, m.mean_density
    )
}

pub fn train(args: &ConfigArgs, steps: Option<u64>) -> Result<(), CliError> {
    let extra: Vec<(String, String)> = steps.map(|s| ("steps".to_string(), s.to_string())).into_iter().collect();
    let cfg = load(args, &extra)?.config;
    let hash = config_hash(&cfg);
    let dir = run_dir(args.out_dir.as_deref(), &format!("train-{}", &hash[..12]))?;
    let ckpt_dir = dir.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", ckpt_dir.display())))?;
    }
    let task = cfg.task_config()?;
    let mut model = EncoderModel::new(cfg.model.clone())?;
    let mut opt = OptimizerState::new(&model, cfg.learning_rate);
    let mut manifest = RunManifest::new("train", &cfg);
    eprintln!("training {} parameters for {} steps into {}", model.num_parameters(), cfg.steps, dir.display());

    let mut metrics = TrainMetrics::default();
    let report_every = (cfg.steps / 20).max(1);
    let run = train_loop(&mut model, &mut opt, &task, cfg.steps, |s, m| {
        metrics.steps.push(s.clone());
        let done = s.step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(m, ckpt_dir.join(format!("step_{done:06}.ckpt")))?;
        }
        if done % report_every == 0 || done == cfg.steps {
            eprintln!(
                "step {done:>6}  loss {:.4}  bce {:.4}  acc {:.4}  density {:.4}",
                s.loss, s.task_loss, s.accuracy, s.mean_density
            );
        }
        Ok(())
    });
    write_file(&dir.join("metrics.csv"), &metrics.to_csv())?;
    manifest.output("metrics", "metrics.csv");
    if let Err(e) = run {
        let path = dir.join("failure.txt");
        write_file(&path, &format!("{e}\n"))?;
        manifest.output("failure", "failure.txt");
        manifest.write(&dir)?;
        return Err(CliError::Runtime(format!("{e} (details in {})", path.display())));
    }
    if cfg.checkpoint_every > 0 {
        manifest.output("checkpoints", "checkpoints/");
    }
    save_checkpoint(&model, dir.join("model.ckpt"))?;
    manifest.output("checkpoint", "model.ckpt");
    if cfg.eval_batches > 0 {
        let m = evaluate(&model, &eval_batches(&cfg)?, cfg.seed())?;
        write_file(&dir.join("density.csv"), &density_csv(&m.density))?;
        write_file(&dir.join("eval.txt"), &eval_summary(&m))?;
        manifest.output("density", "density.csv");
        manifest.output("eval", "eval.txt");
        eprintln!("held-out loss {:.4}, accuracy {:.4}, density {:.4}", m.loss, m.accuracy, m.mean_density);
    }
    manifest.write(&dir)
}

/// Manifest of the run a checkpoint came from: next to it or one level up.
fn sibling_manifest(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.ancestors().skip(1).take(2).map(|d| d.join(MANIFEST_FILE)).find(|p| p.is_file())
}

fn model_overrides(model: &ModelConfig) -> Vec<(String, String)> {
    let mut out = vec![("seq_len".to_string(), model.max_seq_len.to_string())];
    out.extend(model.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    out
}

pub fn eval(checkpoint: &Path, args: &ConfigArgs) -> Result<(), CliError> {
    let model = load_checkpoint(checkpoint)
        .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let base = if args.config.is_none() { model_overrides(&model.config) } else { Vec::new() };
    let loaded = load(args, &base)?;
    let mut cfg = loaded.config;
    if args.config.is_some() {
        if let Some(path) = sibling_manifest(checkpoint) {
            let run = load_config(Some(&path), &[])?;
            if run.base_hash != loaded.base_hash {
                eprintln!(
                    "warning: checkpoint run manifest {} hashes to {} but the given config hashes to {}; proceeding",
                    path.display(),
                    &run.base_hash[..12],
                    &loaded.base_hash[..12]
                );
            }
        }
        if cfg.model != model.config {
            eprintln!("warning: checkpoint architecture differs from the config; using the checkpoint");
        }
    }
    cfg.model = model.config.clone();
    if cfg.seq_len > cfg.model.max_seq_len {
        return Err(CliError::Usage(format!(
            "seq_len {} exceeds the checkpoint's max_seq_len {}",
            cfg.seq_len, cfg.model.max_seq_len
        )));
    }
    if cfg.eval_batches == 0 {
        return Err(CliError::Usage("eval_batches must be at least 1".into()));
    }
    let hash = config_hash(&cfg);
    let dir = run_dir(args.out_dir.as_deref(), &format!("eval-{}", &hash[..12]))?;
    let m = evaluate(&model, &eval_batches(&cfg)?, cfg.seed())?;
    write_file(&dir.join("density.csv"), &density_csv(&m.density))?;
    write_file(&dir.join("eval.txt"), &eval_summary(&m))?;
    let mut manifest = RunManifest::new("eval", &cfg);
    manifest.output("checkpoint", checkpoint.display().to_string());
    manifest.output("density", "density.csv");
    manifest.output("eval", "eval.txt");
    manifest.write(&dir)?;
    print!("{}", eval_summary(&m));
    Ok(())
}

pub fn sample_mask(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    input: Option<&Path>,
    inject: Option<Inject>,
) -> Result<(), CliError> {
    let (cfg, model) = match checkpoint {
        Some(path) => {
            let model = load_checkpoint(path)
                .map_err(|e| CliError::Usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
            let mut cfg = load(args, &model_overrides(&model.config))?.config;
            cfg.model = model.config.clone();
            (cfg, model)
        }
        None => {
            let cfg = load(args, &[])?.config;
            let model = EncoderModel::new(cfg.model.clone())?;
            (cfg, model)
        }
    };
    let seed = cfg.seed();
    let seq = match input {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            parse_sequences(&text)?
                .into_iter()
                .next()
                .ok_or_else(|| CliError::Usage(format!("{} holds no sequence", path.display())))?
        }
        None => {
            let task = TaskConfig::new(cfg.seq_len, 1, seed)?;
            generate_batch(&task, &mut substream(seed, &[purpose::EVAL_DATA, 0])).tokens.remove(0)
        }
    };
    let n = seq.len();
    let plan = match inject {
        None => MaskPlan::Sample,
        Some(Inject::Full) => MaskPlan::Full,
        Some(Inject::Identity) => MaskPlan::Identity,
    };
    let ctx = ForwardContext::eval(seed, 0).with_plan(plan);
    let output = model_forward(&model, std::slice::from_ref(&seq), &ctx)?;
    let example = &output.examples[0];
    let valid: Vec<bool> = seq.iter().map(|&t| t != PAD_TOKEN).collect();
    let padded = valid.iter().any(|&v| !v);
    let injected = match inject {
        None => None,
        Some(Inject::Full) => Some(EdgeMask::full(n, n)),
        Some(Inject::Identity) => Some(EdgeMask::identity(n)),
    };

    let tag = match inject {
        None => "",
        Some(Inject::Full) => "-full",
        Some(Inject::Identity) => "-identity",
    };
    let dir = run_dir(args.out_dir.as_deref(), &format!("sample-mask-{}{tag}", &config_hash(&cfg)[..12]))?;
    let mut manifest = RunManifest::new("sample-mask", &cfg);
    let tokens: Vec<String> = seq.iter().map(u32::to_string).collect();
    write_file(&dir.join("input.txt"), &format!("{}\n", tokens.join(" ")))?;
    manifest.output("input", "input.txt");
    let mut summary = String::from("layer,head,edges,density,total_flops\n");
    for (l, (layer, cache)) in model.layers.iter().zip(&example.layers).enumerate() {
        for (h, (head, trace)) in layer.heads.iter().zip(&cache.traces).enumerate() {
            // Replays the head on the same substream with counters on.
            let opts = HeadForwardOptions {
                injected_mask: injected.as_ref(),
                valid: padded.then_some(valid.as_slice()),
                inference_only: true,
                count_ops: true,
                ..Default::default()
            };
            let mut rng = substream(seed, &[ctx.sample_purpose, ctx.step, 0, l as u64, h as u64]);
            let counted = head_forward(head, &cache.input, &mut rng, opts)?;
            if counted.mask != trace.mask {
                return Err(CliError::Runtime(format!("instrumented replay of layer {l} head {h} drew a different mask")));
            }
            let cost = instrument_forward(&counted)?;
            let mask_file = format!("mask_l{l}_h{h}.txt");
            let cost_file = format!("cost_l{l}_h{h}.csv");
            write_file(&dir.join(&mask_file), &counted.mask.to_dump_string())?;
            write_file(&dir.join(&cost_file), &cost_csv(&cost))?;
            manifest.output(&format!("mask_l{l}_h{h}"), mask_file);
            manifest.output(&format!("cost_l{l}_h{h}"), cost_file);
            let _ = writeln!(summary, "{l},{h},{},{},{}", counted.mask.num_edges(), counted.density, cost.total());
        }
    }
    write_file(&dir.join("masks.csv"), &summary)?;
    manifest.output("summary", "masks.csv");
    manifest.write(&dir)?;
    print!("{summary}");
    eprintln!("wrote {}", dir.display());
    Ok(())
}

pub fn verify_theory(n: usize, k: usize) -> Result<(), CliError> {
    let set = build_patterns(n, k)?;
    let report = verify_assumption1(&set.to_vec())?;
    println!("{report}");
    if report.all_pass() {
        Ok(())
    } else {
        let failed: Vec<&str> = [
            (!report.condition1).then_some("condition 1 (self-loops)"),
            (!report.condition2).then_some("condition 2 (Hamiltonian path)"),
            (!report.condition3).then_some("condition 3 (reachability)"),
        ]
        .into_iter()
        .flatten()
        .collect();
        Err(CliError::Check(failed.join(", ")))
    }
}

/// Model size for `gradcheck`; the default is the tiny model.
#[derive(Debug, Clone, Copy)]
pub struct GradcheckShape {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub clusters: usize,
    pub seq_len: usize,
}

impl Default for GradcheckShape {
    fn default() -> Self {
        Self { layers: 1, heads: 1, d_model: 8, clusters: 2, seq_len: 6 }
    }
}

pub fn gradcheck(shape: GradcheckShape, h: f64, tol: f64, seed: u64) -> Result<(), CliError> {
    let cfg = ModelConfig {
        n_layers: shape.layers,
        n_heads: shape.heads,
        d_model: shape.d_model,
        d_ff: shape.d_model,
        clusters: shape.clusters,
        vocab_size: shape.seq_len + 1,
        max_seq_len: shape.seq_len,
        density_weight: 0.1,
        seed,
        ..ModelConfig::default()
    };
    let model = EncoderModel::new(cfg)?;
    let task = TaskConfig::new(shape.seq_len, 2, seed)?;
    let batch = generate_batch(&task, &mut substream(seed, &[purpose::DATA, 0]));
    let report = gradcheck_model(&model, &batch, seed, h, tol)?;
    println!("tensor,entries,max_rel_error,result");
    for (name, r) in &report.reports {
        println!("{name},{},{:.3e},{}", r.checked, r.max_rel_error, if r.passed { "PASS" } else { "FAIL" });
    }
    println!("max_rel_error = {:.3e}", report.max_rel_error);
    println!("relu_margin = {:.3e}", report.relu_margin);
    if report.relu_margin < 10.0 * h {
        eprintln!("warning: a ReLU input lies within 10h of its kink; differences there are unreliable");
    }
    if report.passed {
        Ok(())
    } else {
        let failing: Vec<&str> = report.failing().collect();
        Err(CliError::Check(format!("gradients disagree for {}", failing.join(", "))))
    }
}

pub fn flops(n: u64, m: u64, k: u64, d: u64) -> Result<(), CliError> {
    if n == 0 || d == 0 || k == 0 {
        return Err(CliError::Usage("n, k and d must be positive".into()));
    }
    if m > n * n {
        return Err(CliError::Usage(format!("m = {m} exceeds n² = {}", n * n)));
    }
    let r = flops_attention(n, m, k, d);
    let parts = r.memberships + r.block_matrix + r.sampling + r.masked_dot_products + r.softmax_pool;
    if parts != r.total() {
        return Err(CliError::Check(format!("components sum to {parts}, total reports {}", r.total())));
    }
    print!("{}", cost_csv(&r));
    println!("# total_flops = {}", r.total());
    println!("# peak_memory_bytes = {}", r.peak_memory_floats * sbmt_core::costing::BYTES_PER_FLOAT);
    println!("# density = {}", m as f64 / (n * n) as f64);
    println!("# convention: {FLOP_CONVENTION}");
    Ok(())
}

pub fn generate_data(seq_len: usize, batch_size: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let task = TaskConfig::new(seq_len, batch_size, seed)?;
    let batch = generate_batch(&task, &mut substream(seed, &[purpose::DATA, 0]));
    write_file(out, &to_dump_string(&batch))
}
