use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use flowtts::cfm::sample_noise;
use flowtts::features::{read_features, write_features};
use flowtts::infer::{generate, infill_leaked};
use flowtts::model::VectorFieldModel;
use flowtts::sampler::{build_schedule, leak_nfe_count, nfe_count, FlowSchedule, SwayCoefficient};
use flowtts::tensor::{Real, Tensor};
use flowtts::training::checkpoint::{decode, save_checkpoint};
use flowtts::training::corpus::Corpus;
use flowtts::training::{Precision, Trainer};
use flowtts::verify::{self, e2e, Suite};

use crate::config::{existing, writable_target, RunConfig};
use crate::{CliError, SamplerFlags};

pub fn apply_sampler(cfg: &mut RunConfig, flags: &SamplerFlags, seed: Option<u64>, t_prime: Option<f64>) {
    let s = &mut cfg.sampler;
    if let Some(v) = flags.nfe {
        s.nfe = v;
    }
    if let Some(v) = flags.sway {
        s.sway = v;
    }
    if let Some(v) = flags.solver {
        s.solver = v;
    }
    if let Some(v) = flags.cfg {
        s.cfg = v;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = t_prime {
        s.t_prime = v;
    }
}

fn flow_schedule(cfg: &RunConfig) -> Result<FlowSchedule, CliError> {
    let s = &cfg.sampler;
    let sway = SwayCoefficient::new(s.sway).map_err(|e| CliError::Usage(e.to_string()))?;
    build_schedule(s.nfe, sway, s.solver, s.cfg).map_err(|e| CliError::Usage(e.to_string()))
}

fn sampler_line(cfg: &RunConfig) -> String {
    let s = &cfg.sampler;
    format!(
        "nfe={} sway={} solver={} cfg={} t_prime={} seed={}",
        s.nfe, s.sway, s.solver, s.cfg, s.t_prime, s.seed
    )
}

fn load_corpus(dir: &Path) -> Result<Corpus, CliError> {
    existing(dir, "corpus")?;
    Corpus::load(dir).map_err(|e| CliError::Usage(format!("corpus {}: {e}", dir.display())))
}

pub fn gen_corpus(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    cfg.corpus.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = Corpus::generate(&cfg.corpus, &mut ChaCha8Rng::seed_from_u64(cfg.corpus.seed))
        .map_err(CliError::failure)?;
    corpus.save(out, force).map_err(|e| match e {
        flowtts::training::corpus::CorpusError::NotEmpty(_) => CliError::Usage(e.to_string()),
        other => CliError::failure(other),
    })?;
    println!(
        "corpus out={} count={} frames={} noise_sigma={} symbols={} feat_dim={} seed={}",
        out.display(),
        corpus.utterances.len(),
        corpus.total_frames(),
        cfg.corpus.noise_sigma,
        cfg.corpus.symbols.chars().count(),
        cfg.corpus.feat_dim,
        cfg.corpus.seed
    );
    Ok(())
}

/// Model and corpus must agree on channels and the vocabulary must fit.
fn check_compatible<T: Real>(model: &VectorFieldModel<T>, corpus: &Corpus) -> Result<(), CliError> {
    let c = model.config();
    if c.feat_dim != corpus.rule.spec.feat_dim {
        return Err(CliError::Usage(format!(
            "model expects {} channels, corpus has {}",
            c.feat_dim, corpus.rule.spec.feat_dim
        )));
    }
    if corpus.vocab.len() > c.vocab_size {
        return Err(CliError::Usage(format!(
            "corpus vocabulary has {} ids, model.vocab_size is {}",
            corpus.vocab.len(),
            c.vocab_size
        )));
    }
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Vec<u8>, CliError> {
    existing(path, "checkpoint")?;
    fs::read(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))
}

fn precision_of(bytes: &[u8]) -> Result<Precision, CliError> {
    // the header is small; decoding in f64 reads the stored settings
    let t: Trainer<f64> = decode(bytes).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(t.config.precision)
}

pub fn train(
    cfg: &RunConfig,
    corpus_dir: &Path,
    out: &Path,
    updates: Option<u64>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let corpus = load_corpus(corpus_dir)?;
    if corpus.utterances.is_empty() {
        return Err(CliError::Usage("corpus is empty".into()));
    }
    let resume_bytes = resume.map(read_checkpoint).transpose()?;
    if out.exists() && !out.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", out.display())));
    }
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    let precision = match &resume_bytes {
        Some(b) => precision_of(b)?,
        None => cfg.training.precision,
    };
    match precision {
        Precision::F32 => train_with::<f32>(cfg, &corpus, out, updates, resume_bytes.as_deref()),
        Precision::F64 => train_with::<f64>(cfg, &corpus, out, updates, resume_bytes.as_deref()),
    }
}

fn train_with<T: Real>(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    updates: Option<u64>,
    resume: Option<&[u8]>,
) -> Result<(), CliError> {
    let mut trainer: Trainer<T> = match resume {
        Some(bytes) => decode(bytes).map_err(|e| CliError::Usage(e.to_string()))?,
        None => {
            let model = VectorFieldModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.model_seed))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Trainer::new(model, cfg.training.clone()).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    check_compatible(&trainer.model, corpus)?;
    let until = updates.unwrap_or(trainer.config.total_updates);
    let mut resolved = cfg.clone();
    resolved.model = trainer.model.config().clone();
    resolved.training = trainer.config.clone();
    fs::write(out.join("run.toml"), resolved.to_toml()).map_err(CliError::failure)?;
    println!(
        "train corpus_count={} start={} until={} seed={} model_seed={} log_every={} out={}",
        corpus.utterances.len(),
        trainer.updates(),
        until,
        trainer.config.seed,
        cfg.model_seed,
        cfg.log_every,
        out.display()
    );

    let log_every = cfg.log_every.max(1);
    let mut log = BufWriter::new(File::create(out.join("loss.log")).map_err(CliError::failure)?);
    let (mut window, mut window_n) = (0.0, 0u64);
    let mut best = f64::INFINITY;
    let mut io_error = None;
    let result = trainer.fit(corpus, until, |tr, r| {
        window += r.loss;
        window_n += 1;
        if window_n == log_every || tr.updates() == until {
            let mean = window / window_n as f64;
            let line = format!(
                "update={} loss={:.6} lr={:.6e} grad_norm={:.4}",
                tr.updates(),
                mean,
                r.lr,
                r.grad_norm
            );
            println!("{line}");
            let mut res = writeln!(log, "{line}");
            if mean < best && res.is_ok() {
                best = mean;
                res = save_checkpoint(tr, &out.join("best.ckpt")).map_err(std::io::Error::other);
            }
            if let Err(e) = res {
                io_error.get_or_insert(e);
            }
            window = 0.0;
            window_n = 0;
        }
    });
    log.flush().map_err(CliError::failure)?;
    if let Err(e) = result {
        return Err(CliError::Failure(format!("training aborted: {e}")));
    }
    if let Some(e) = io_error {
        return Err(CliError::failure(e));
    }
    save_checkpoint(&trainer, &out.join("final.ckpt")).map_err(CliError::failure)?;
    println!("done updates={} final={}", trainer.updates(), out.join("final.ckpt").display());
    Ok(())
}

pub struct InferRequest {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub prompt: Option<PathBuf>,
    pub prompt_id: Option<String>,
    pub prompt_text: Option<String>,
    pub gen_text: String,
    pub duration: Option<usize>,
}

/// Collapses runs of the nearest template into a symbol string.
fn collapsed_symbols<T: Real>(corpus: &Corpus, features: &Tensor<T>) -> String {
    let symbols: Vec<char> = corpus.rule.spec.symbols.chars().collect();
    let mut out = String::new();
    let mut last = None;
    for k in corpus.rule.nearest_templates(features) {
        if last != Some(k) {
            out.push(symbols[k]);
            last = Some(k);
        }
    }
    out
}

/// Slot-wise agreement of `features` with `text`, when the rule length fits.
fn agreement<T: Real>(corpus: &Corpus, features: &Tensor<T>, text: &str) -> Option<(usize, usize)> {
    if corpus.rule.frames(text).ok()? != features.shape()[0] {
        return None;
    }
    let decoded = corpus.rule.decode_slots(features, text, 0).ok()?;
    let hits = decoded.iter().zip(text.chars()).filter(|(a, b)| **a == *b).count();
    Some((hits, decoded.len()))
}

fn load_model<T: Real>(bytes: &[u8]) -> Result<VectorFieldModel<T>, CliError> {
    let trainer: Trainer<T> = decode(bytes).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(trainer.ema_model())
}

pub fn infer(cfg: &RunConfig, req: &InferRequest) -> Result<(), CliError> {
    let schedule = flow_schedule(cfg)?;
    let bytes = read_checkpoint(&req.checkpoint)?;
    let corpus = load_corpus(&req.corpus)?;
    if let Some(p) = &req.prompt {
        existing(p, "prompt")?;
    }
    writable_target(&req.out)?;
    let (prompt, prompt_text) = match (&req.prompt, &req.prompt_id) {
        (Some(p), _) => {
            let text = req
                .prompt_text
                .clone()
                .ok_or_else(|| CliError::Usage("--prompt needs --prompt-text".into()))?;
            (read_features(p).map_err(|e| CliError::Usage(e.to_string()))?, text)
        }
        (None, Some(id)) => {
            let u = corpus
                .utterances
                .iter()
                .find(|u| &u.id == id)
                .ok_or_else(|| CliError::Usage(format!("no utterance {id} in the corpus")))?;
            (u.features.clone(), u.text.clone())
        }
        (None, None) => {
            if req.duration.is_none() {
                return Err(CliError::Usage("without a prompt, --duration is required".into()));
            }
            (Tensor::zeros([0, corpus.rule.spec.feat_dim]), String::new())
        }
    };
    match precision_of(&bytes)? {
        Precision::F32 => infer_with::<f32>(cfg, req, &bytes, &corpus, &prompt.cast(), &prompt_text, &schedule),
        Precision::F64 => infer_with::<f64>(cfg, req, &bytes, &corpus, &prompt.cast(), &prompt_text, &schedule),
    }
}

fn infer_with<T: Real>(
    cfg: &RunConfig,
    req: &InferRequest,
    bytes: &[u8],
    corpus: &Corpus,
    prompt: &Tensor<T>,
    prompt_text: &str,
    schedule: &FlowSchedule,
) -> Result<(), CliError> {
    let model = load_model::<T>(bytes)?;
    check_compatible(&model, corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let g = generate(
        &model,
        &corpus.vocab,
        prompt,
        prompt_text,
        &req.gen_text,
        req.duration,
        schedule,
        &mut rng,
    )
    .map_err(CliError::failure)?;
    write_features(&req.out, &g.generated.cast()).map_err(CliError::failure)?;
    println!("infer {} duration={:?}", sampler_line(cfg), req.duration);
    println!(
        "result evaluations={} nfe_count={} total_frames={} prompt_frames={} generated_frames={} out={}",
        g.evaluations,
        nfe_count(schedule),
        g.total_frames,
        g.prompt_frames,
        g.total_frames - g.prompt_frames,
        req.out.display()
    );
    let mut line = format!("decode nearest={}", collapsed_symbols(corpus, &g.generated));
    if let Some((hits, n)) = agreement(corpus, &g.generated, &req.gen_text) {
        line.push_str(&format!(" gen_text_slots={hits}/{n}"));
    }
    println!("{line}");
    Ok(())
}

pub struct LeakRequest {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub target_text: String,
    pub leak_text: Option<String>,
    pub leak: Option<PathBuf>,
}

pub fn leak_override(cfg: &RunConfig, req: &LeakRequest) -> Result<(), CliError> {
    let schedule = flow_schedule(cfg)?;
    let t_prime = cfg.sampler.t_prime;
    let last = *schedule.steps().last().expect("non-empty schedule");
    if !(t_prime > 0.0 && t_prime < last) {
        return Err(CliError::Usage(format!("t_prime {t_prime} must lie in (0, {last})")));
    }
    let bytes = read_checkpoint(&req.checkpoint)?;
    let corpus = load_corpus(&req.corpus)?;
    if let Some(p) = &req.leak {
        existing(p, "leak features")?;
    }
    writable_target(&req.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let x_leak: Tensor<f64> = match (&req.leak, &req.leak_text) {
        (Some(p), _) => read_features(p).map_err(|e| CliError::Usage(e.to_string()))?.cast(),
        (None, Some(text)) => corpus.rule.render_noisy(text, &mut rng).map_err(|e| CliError::Usage(e.to_string()))?,
        (None, None) => return Err(CliError::Usage("pass --leak or --leak-text".into())),
    };
    match precision_of(&bytes)? {
        Precision::F32 => leak_with::<f32>(cfg, req, &bytes, &corpus, &x_leak.cast(), &schedule, &mut rng),
        Precision::F64 => leak_with::<f64>(cfg, req, &bytes, &corpus, &x_leak, &schedule, &mut rng),
    }
}

fn leak_with<T: Real>(
    cfg: &RunConfig,
    req: &LeakRequest,
    bytes: &[u8],
    corpus: &Corpus,
    x_leak: &Tensor<T>,
    schedule: &FlowSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(), CliError> {
    let model = load_model::<T>(bytes)?;
    check_compatible(&model, corpus)?;
    if x_leak.shape().get(1) != Some(&model.config().feat_dim) {
        return Err(CliError::Usage("leak features do not match the model channels".into()));
    }
    let len = x_leak.shape()[0];
    let z = corpus
        .extended(&req.target_text, len)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let x0 = sample_noise(x_leak.shape(), rng);
    let cond = Tensor::zeros(x_leak.shape().to_vec());
    let t_prime = cfg.sampler.t_prime;
    let out = infill_leaked(&model, &cond, &z, &x0, x_leak, t_prime, schedule).map_err(CliError::failure)?;
    write_features(&req.out, &out.output.cast()).map_err(CliError::failure)?;
    println!("leak_override {} frames={len}", sampler_line(cfg));
    println!(
        "result evaluations={} expected={} out={}",
        out.evaluations.total(),
        leak_nfe_count(schedule, t_prime),
        req.out.display()
    );
    let mut line = format!("decode nearest={}", collapsed_symbols(corpus, &out.output));
    let target = agreement(corpus, &out.output, &req.target_text);
    let leaked = req.leak_text.as_deref().and_then(|t| agreement(corpus, &out.output, t));
    if let Some((h, n)) = target {
        line.push_str(&format!(" target_slots={h}/{n}"));
    }
    if let Some((h, n)) = leaked {
        line.push_str(&format!(" leak_slots={h}/{n}"));
    }
    let follows = match (target, leaked) {
        (Some((t, _)), Some((l, _))) if t > l => "target",
        (Some((t, _)), Some((l, _))) if l > t => "leak",
        (Some(_), Some(_)) => "tie",
        (Some((t, n)), None) if t == n => "target",
        _ => "undetermined",
    };
    println!("{line} follows={follows}");
    Ok(())
}

pub fn schedule(cfg: &RunConfig, with_leak: bool) -> Result<(), CliError> {
    let s = flow_schedule(cfg)?;
    println!(
        "schedule {} segments={} nfe_declared={} nfe_count={}",
        sampler_line(cfg),
        s.segments(),
        s.declared_nfe(),
        nfe_count(&s)
    );
    if with_leak {
        let t = cfg.sampler.t_prime;
        let start = s.steps().iter().position(|&x| x >= t).unwrap_or(s.segments());
        println!(
            "leak t_prime={t} start_index={start} start_t={:.6} nfe_count={}",
            s.steps()[start],
            leak_nfe_count(&s, t)
        );
    }
    for (i, t) in s.steps().iter().enumerate() {
        println!("step {i} {t:.12}");
    }
    Ok(())
}

pub fn verify(cfg: &RunConfig, suite: Suite, seed: u64) -> Result<(), CliError> {
    let checks = match suite {
        Suite::E2e => {
            let config = e2e::E2eConfig {
                corpus: cfg.corpus.clone(),
                model: cfg.model.clone(),
                model_seed: cfg.model_seed,
                training: cfg.training.clone(),
                eval: cfg.eval.clone(),
            };
            let every = cfg.log_every.max(1);
            e2e::run(&config, |r| {
                if (r.update + 1) % every == 0 {
                    eprintln!("update={} loss={:.6}", r.update + 1, r.loss);
                }
            })
            .checks
        }
        other => verify::run_suite(other, seed),
    };
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("{c}");
    }
    println!(
        "summary suite={} seed={seed} checks={} failed={failed}",
        suite.name(),
        checks.len()
    );
    if failed > 0 {
        Err(CliError::Failure(format!("{failed} check(s) failed")))
    } else {
        Ok(())
    }
}
