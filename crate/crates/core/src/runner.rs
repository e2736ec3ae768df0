//! The experiment runner: pretraining, the alignment loop, evaluation,
//! ablations and the oracle suite, with CSV metrics, sample dumps and
//! resumable checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{DenoiserSpec, DiscreteWorld, ExperimentConfig, Variant, WorldSpec, MASK_CHAR};
use crate::continuous::ContinuousPolicy;
use crate::discrete::{pretrain_on_distribution, DiscreteDenoiser, DiscretePolicy, PretrainReport};
use crate::error::{Error, Result};
use crate::estep::{batch_stats, estep_batch, Searchable, X0Source};
use crate::eval::{
    diversity_euclidean, diversity_levenshtein, elbo_exact_for_policy, elbo_surrogate, mode_coverage, reward_stats,
    ElboRecord, Estimator,
};
use crate::mstep::MStep;
use crate::numkit::reduce::softmax;
use crate::numkit::RngStream;
use crate::oracle::{self, OracleOptions, OracleReport};
use crate::par::Exec;
use crate::policy::{rollout, DiffusionPolicy, Trajectory};
use crate::softq::ExactSoftTables;

pub const CSV_HEADER: &str = "epoch,elbo,estimator,elbo_samples,mean_reward,reward_std,diversity,mode_coverage,\
loss_before,loss_after,weight_entropy,fallback_steps";

const STREAM_PRETRAIN: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_ESTEP: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_SURROGATE: u64 = 5;
const STREAM_POSTERIOR: u64 = 6;

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub record: ElboRecord,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub weight_entropy: Option<f64>,
    pub fallback_steps: Option<usize>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(s: &str) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Data(format!("bad CSV field '{s}'")))
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let r = &self.record;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.elbo,
            r.estimator,
            r.elbo_samples,
            r.mean_reward,
            r.reward_std,
            opt(r.diversity),
            opt(r.mode_coverage),
            opt(self.loss_before),
            opt(self.loss_after),
            opt(self.weight_entropy),
            opt(self.fallback_steps),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Data(format!("metrics row with {} fields", f.len())));
        }
        let need = |s: &str| parse_opt::<f64>(s)?.ok_or_else(|| Error::Data("empty required field".into()));
        let estimator = match f[2] {
            "exact_tabular" => Estimator::ExactTabular,
            "surrogate_is" => Estimator::SurrogateIs,
            other => return Err(Error::Data(format!("unknown estimator '{other}'"))),
        };
        Ok(Self {
            record: ElboRecord {
                epoch: parse_opt(f[0])?.unwrap_or(0),
                elbo: need(f[1])?,
                estimator,
                elbo_samples: parse_opt(f[3])?.unwrap_or(0),
                mean_reward: need(f[4])?,
                reward_std: need(f[5])?,
                diversity: parse_opt(f[6])?,
                mode_coverage: parse_opt(f[7])?,
            },
            loss_before: parse_opt(f[8])?,
            loss_after: parse_opt(f[9])?,
            weight_entropy: parse_opt(f[10])?,
            fallback_steps: parse_opt(f[11])?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory; nothing is written when `None`.
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) after this epoch, as if interrupted.
    pub stop_after: Option<usize>,
    pub exec: Exec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub params: Vec<f64>,
    /// Final amortized samples, one rendered sample per entry.
    pub samples: Vec<String>,
}

impl RunOutput {
    pub fn elbo_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.record.elbo).collect()
    }

    pub fn last(&self) -> &MetricsRow {
        self.rows.last().expect("at least the epoch-0 row")
    }
}

/// Per-world operations the generic loop needs.
pub trait LabPolicy: Searchable + Clone {
    /// The pretrained policy for `cfg`.
    fn pretrained(cfg: &ExperimentConfig, exec: Exec) -> Result<Self>;

    /// `(elbo, estimator, samples)` for `policy`.
    fn elbo(policy: &Self, anchor: &Self, cfg: &ExperimentConfig, epoch: usize, exec: Exec)
        -> Result<(f64, Estimator, usize)>;

    /// `(diversity, mode coverage)` of a sample set.
    fn sample_metrics(samples: &[Self::State], cfg: &ExperimentConfig) -> Result<(Option<f64>, Option<f64>)>;

    fn render(x: &Self::State, cfg: &ExperimentConfig) -> String;
}

fn root(cfg: &ExperimentConfig) -> RngStream {
    RngStream::new(cfg.seed, 0)
}

fn guide<'a, P>(cfg: &ExperimentConfig, anchor: &'a P, base: &'a P) -> &'a P {
    match cfg.estep.x0hat_source {
        X0Source::Prior => anchor,
        X0Source::Current => base,
    }
}

fn surrogate_elbo<P: LabPolicy>(
    policy: &P,
    anchor: &P,
    cfg: &ExperimentConfig,
    epoch: usize,
    exec: Exec,
) -> Result<(f64, Estimator, usize)> {
    let rng = root(cfg).derive_path(&[STREAM_SURROGATE, epoch as u64]);
    let n = cfg.eval.surrogate_batch.max(1);
    let batch = estep_batch(policy, guide(cfg, anchor, policy), &cfg.reward, &cfg.estep, &rng, n, 0, exec)?;
    Ok((elbo_surrogate(policy, &batch, &cfg.estep.soft_q())?, Estimator::SurrogateIs, n))
}

impl LabPolicy for ContinuousPolicy {
    fn pretrained(cfg: &ExperimentConfig, _exec: Exec) -> Result<Self> {
        let WorldSpec::Continuous(w) = &cfg.world else {
            return Err(Error::Config("expected a continuous world".into()));
        };
        let mut rng = root(cfg).derive(STREAM_INIT);
        ContinuousPolicy::new(w.schedule()?, w.mixture.clone(), &w.hidden, w.activation, &mut rng)
    }

    fn elbo(p: &Self, anchor: &Self, cfg: &ExperimentConfig, epoch: usize, exec: Exec) -> Result<(f64, Estimator, usize)> {
        surrogate_elbo(p, anchor, cfg, epoch, exec)
    }

    fn sample_metrics(samples: &[Vec<f64>], cfg: &ExperimentConfig) -> Result<(Option<f64>, Option<f64>)> {
        let WorldSpec::Continuous(w) = &cfg.world else {
            return Err(Error::Config("expected a continuous world".into()));
        };
        let div = if samples.len() >= 2 { Some(diversity_euclidean(samples)?) } else { None };
        let radius = cfg.coverage_radius().expect("continuous world has a radius");
        Ok((div, Some(mode_coverage(samples, &w.mixture, radius))))
    }

    fn render(x: &Vec<f64>, _cfg: &ExperimentConfig) -> String {
        x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
    }
}

fn discrete_world(cfg: &ExperimentConfig) -> Result<&DiscreteWorld> {
    match &cfg.world {
        WorldSpec::Discrete(w) => Ok(w),
        WorldSpec::Continuous(_) => Err(Error::Config("expected a discrete world".into())),
    }
}

/// Hash identifying a pretrained denoiser: the world (without the
/// checkpoint path) and the seed.
pub fn pretrain_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut w = discrete_world(cfg)?.clone();
    w.pretrained = None;
    let v = serde_json::json!({ "world": w, "seed": cfg.seed });
    let text = serde_json::to_string(&v)?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn fresh_denoiser(cfg: &ExperimentConfig) -> Result<DiscretePolicy> {
    let w = discrete_world(cfg)?;
    let space = w.space()?;
    let den = match &w.denoiser {
        DenoiserSpec::Tabular => DiscreteDenoiser::tabular(space, w.steps)?,
        DenoiserSpec::Mlp { hidden, activation } => {
            DiscreteDenoiser::mlp(space, w.steps, hidden, *activation, &mut root(cfg).derive(STREAM_INIT))?
        }
    };
    DiscretePolicy::new(den)
}

/// Pretrains the discrete denoiser on the configured distribution.
pub fn pretrain(cfg: &ExperimentConfig, exec: Exec) -> Result<(DiscretePolicy, PretrainReport)> {
    let w = discrete_world(cfg)?;
    let mut p = fresh_denoiser(cfg)?;
    let mut rng = root(cfg).derive(STREAM_PRETRAIN);
    let report = pretrain_on_distribution(&mut p.denoiser, &w.distribution()?, &w.pretrain, &mut rng, exec)?;
    Ok((p, report))
}

impl LabPolicy for DiscretePolicy {
    fn pretrained(cfg: &ExperimentConfig, exec: Exec) -> Result<Self> {
        let w = discrete_world(cfg)?;
        match &w.pretrained {
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                if ck.kind != CheckpointKind::Pretrained {
                    return Err(Error::Checkpoint(format!("{} is not a pretrained denoiser", path.display())));
                }
                ck.check_hash(&pretrain_hash(cfg)?)?;
                let mut p = fresh_denoiser(cfg)?;
                p.set_params(ck.array("params")?)?;
                Ok(p)
            }
            None => Ok(pretrain(cfg, exec)?.0),
        }
    }

    fn elbo(p: &Self, anchor: &Self, cfg: &ExperimentConfig, epoch: usize, exec: Exec) -> Result<(f64, Estimator, usize)> {
        if cfg.enumerable() {
            let tables = ExactSoftTables::build(p, &cfg.reward, &cfg.estep.soft_q())?;
            Ok((elbo_exact_for_policy(p, &tables)?, Estimator::ExactTabular, 0))
        } else {
            surrogate_elbo(p, anchor, cfg, epoch, exec)
        }
    }

    fn sample_metrics(samples: &[Vec<u8>], _cfg: &ExperimentConfig) -> Result<(Option<f64>, Option<f64>)> {
        let div = if samples.len() >= 2 { Some(diversity_levenshtein(samples)?) } else { None };
        Ok((div, None))
    }

    fn render(x: &Vec<u8>, cfg: &ExperimentConfig) -> String {
        let w = discrete_world(cfg).expect("discrete world");
        w.space().expect("valid space").render(x, &w.alphabet(), MASK_CHAR)
    }
}

/// Reward statistics, diversity and coverage of `n` amortized rollouts on
/// the evaluation stream of `epoch`; returns the rollouts too.
/// Stream for evaluation `purpose` at `epoch`; replicate 0 is the stream the
/// training loop uses.
fn eval_stream(cfg: &ExperimentConfig, purpose: u64, epoch: usize, rep: u64) -> RngStream {
    let s = root(cfg).derive_path(&[purpose, epoch as u64]);
    if rep == 0 {
        s
    } else {
        s.derive(rep)
    }
}

#[allow(clippy::type_complexity)]
fn amortized_metrics<P: LabPolicy>(
    policy: &P,
    cfg: &ExperimentConfig,
    epoch: usize,
    rep: u64,
    n: usize,
    exec: Exec,
) -> Result<(Vec<Trajectory<P::State>>, f64, f64, Option<f64>, Option<f64>)> {
    let rng = eval_stream(cfg, STREAM_EVAL, epoch, rep);
    let trs = rollout(policy, &rng, n, exec, |x| P::terminal_reward(&cfg.reward, x))?;
    let rewards: Vec<f64> = trs.iter().map(|t| t.reward).collect();
    let (mean, std) = reward_stats(&rewards);
    let xs: Vec<P::State> = trs.iter().map(|t| t.terminal().clone()).collect();
    let (div, cov) = P::sample_metrics(&xs, cfg)?;
    Ok((trs, mean, std, div, cov))
}

fn evaluate<P: LabPolicy>(
    policy: &P,
    anchor: &P,
    cfg: &ExperimentConfig,
    epoch: usize,
    exec: Exec,
) -> Result<(ElboRecord, Vec<String>)> {
    let (trs, mean, std, div, cov) = amortized_metrics(policy, cfg, epoch, 0, cfg.eval.samples, exec)?;
    let (elbo, estimator, elbo_samples) = P::elbo(policy, anchor, cfg, epoch, exec)?;
    if !elbo.is_finite() {
        return Err(Error::NonFinite(format!("ELBO at epoch {epoch}")));
    }
    let rendered = trs.iter().map(|t| P::render(t.terminal(), cfg)).collect();
    Ok((
        ElboRecord {
            epoch,
            elbo,
            estimator,
            elbo_samples,
            mean_reward: mean,
            reward_std: std,
            diversity: div,
            mode_coverage: cov,
        },
        rendered,
    ))
}

struct State<P> {
    policy: P,
    anchor: P,
    mstep: MStep,
    epoch: usize,
    rows: Vec<MetricsRow>,
}

impl<P: LabPolicy> State<P> {
    fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Run,
            config_hash: cfg.hash(),
            epoch: self.epoch,
            seed: cfg.seed,
            adam_step: self.mstep.adam.step,
            arrays: vec![
                ("params".into(), self.policy.params()),
                ("anchor".into(), self.anchor.params()),
                ("adam_m".into(), self.mstep.adam.m.clone()),
                ("adam_v".into(), self.mstep.adam.v.clone()),
            ],
            metrics: self.rows.iter().map(MetricsRow::to_csv).collect(),
        }
    }

    fn restore(&mut self, ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
        if ck.kind != CheckpointKind::Run {
            return Err(Error::Checkpoint("resume needs a run checkpoint".into()));
        }
        ck.check_hash(&cfg.hash())?;
        if ck.epoch > cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint at epoch {} is past the configured {} epochs",
                ck.epoch, cfg.epochs
            )));
        }
        self.policy.set_params(ck.array("params")?)?;
        self.anchor.set_params(ck.array("anchor")?)?;
        let n = self.policy.num_params();
        let (m, v) = (ck.array("adam_m")?, ck.array("adam_v")?);
        if m.len() != n || v.len() != n {
            return Err(Error::Checkpoint("optimizer state does not match the policy".into()));
        }
        self.mstep.adam.m = m.to_vec();
        self.mstep.adam.v = v.to_vec();
        self.mstep.adam.step = ck.adam_step;
        self.epoch = ck.epoch;
        self.rows = ck.metrics.iter().map(|l| MetricsRow::from_csv(l)).collect::<Result<_>>()?;
        if self.rows.len() != ck.epoch + 1 {
            return Err(Error::Checkpoint("metrics history does not match the epoch".into()));
        }
        Ok(())
    }

    /// One E-step plus M-step; returns the metrics row and rendered samples.
    fn epoch_step(&mut self, cfg: &ExperimentConfig, k: usize, exec: Exec) -> Result<(MetricsRow, Vec<String>)> {
        let rng = root(cfg).derive_path(&[STREAM_ESTEP, k as u64]);
        let snapshot = k as u64;
        let (batch, weights) = match cfg.variant {
            Variant::Dav | Variant::SearchAndDistill => {
                let base = if cfg.variant == Variant::Dav { &self.policy } else { &self.anchor };
                let g = guide(cfg, &self.anchor, base);
                let b = estep_batch(base, g, &cfg.reward, &cfg.estep, &rng, cfg.batch, snapshot, exec)?;
                (b, None)
            }
            Variant::Reweight => {
                let mut b = rollout(&self.policy, &rng, cfg.batch, exec, |x| P::terminal_reward(&cfg.reward, x))?;
                for t in &mut b {
                    t.snapshot = snapshot;
                }
                let logits: Vec<f64> = b.iter().map(|t| t.reward / cfg.estep.alpha).collect();
                (b, Some(softmax(&logits)?))
            }
        };
        let report = self.mstep.update(
            &mut self.policy,
            &self.anchor,
            &batch,
            weights.as_deref(),
            snapshot,
            cfg.estep.gamma,
            exec,
        )?;
        let (entropy, fallbacks) = batch_stats(&batch);
        let searched = weights.is_none();
        let (record, samples) = evaluate(&self.policy, &self.anchor, cfg, k, exec)?;
        Ok((
            MetricsRow {
                record,
                loss_before: Some(report.before()),
                loss_after: Some(report.after()),
                weight_entropy: searched.then_some(entropy),
                fallback_steps: searched.then_some(fallbacks),
            },
            samples,
        ))
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

fn prepare_dir(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    Ok(())
}

fn align_generic<P: LabPolicy>(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    let exec = opts.exec;
    let anchor = P::pretrained(cfg, exec)?;
    let mstep = MStep::new(cfg.mstep.clone(), anchor.num_params())?;
    let mut st = State {
        policy: anchor.clone(),
        anchor,
        mstep,
        epoch: 0,
        rows: Vec::new(),
    };
    let mut samples;
    if let Some(path) = &opts.resume {
        st.restore(&Checkpoint::load(path)?, cfg)?;
        samples = Vec::new();
        log::info!("resumed from {} at epoch {}", path.display(), st.epoch);
    } else {
        let (record, s) = evaluate(&st.policy, &st.anchor, cfg, 0, exec)?;
        samples = s;
        st.rows.push(MetricsRow {
            record,
            loss_before: None,
            loss_after: None,
            weight_entropy: None,
            fallback_steps: None,
        });
    }

    let mut csv = match &opts.out {
        Some(out) => {
            prepare_dir(out, cfg)?;
            let mut w = BufWriter::new(File::create(out.join("metrics.csv"))?);
            writeln!(w, "{CSV_HEADER}")?;
            for r in &st.rows {
                writeln!(w, "{}", r.to_csv())?;
            }
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    while st.epoch < stop {
        let k = st.epoch + 1;
        let good = opts.out.as_ref().map(|_| st.checkpoint(cfg));
        let (row, s) = match st.epoch_step(cfg, k, exec) {
            Ok(v) => v,
            Err(e) => {
                if let (Some(out), Some(good)) = (&opts.out, good) {
                    if matches!(e, Error::NonFinite(_)) {
                        let path = out.join("last_good.ckpt");
                        good.save(&path)?;
                        log::error!("epoch {k} failed: {e}; state after epoch {} saved to {}", k - 1, path.display());
                    }
                }
                return Err(e);
            }
        };
        samples = s;
        log::info!(
            "epoch {k}: elbo {:.6} reward {:.4} loss {:.4} -> {:.4}",
            row.record.elbo,
            row.record.mean_reward,
            row.loss_before.unwrap_or(f64::NAN),
            row.loss_after.unwrap_or(f64::NAN)
        );
        if let Some(w) = &mut csv {
            writeln!(w, "{}", row.to_csv())?;
            w.flush()?;
        }
        st.rows.push(row);
        st.epoch = k;
        if let Some(out) = &opts.out {
            if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 {
                let dir = out.join("checkpoints");
                std::fs::create_dir_all(&dir)?;
                st.checkpoint(cfg).save(&dir.join(format!("epoch_{k:04}.ckpt")))?;
            }
        }
    }

    if samples.is_empty() {
        samples = evaluate(&st.policy, &st.anchor, cfg, st.epoch, exec)?.1;
    }
    if let Some(out) = &opts.out {
        let name = if st.epoch == cfg.epochs { "final.ckpt" } else { "interrupted.ckpt" };
        st.checkpoint(cfg).save(&out.join(name))?;
        write_lines(&out.join("samples.txt"), &samples)?;
    }
    Ok(RunOutput {
        rows: st.rows,
        params: st.policy.params(),
        samples,
    })
}

/// Runs the configured variant for `cfg.epochs` epochs.
pub fn align(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.world {
        WorldSpec::Continuous(_) => align_generic::<ContinuousPolicy>(cfg, opts),
        WorldSpec::Discrete(_) => align_generic::<DiscretePolicy>(cfg, opts),
    }
}

/// Runs every variant under the same seed and budget, each in its own
/// subdirectory of `out`.
pub fn ablate(cfg: &ExperimentConfig, out: Option<&Path>, exec: Exec) -> Result<Vec<(Variant, RunOutput)>> {
    cfg.validate()?;
    let mut results = Vec::new();
    for v in Variant::ALL {
        let c = ExperimentConfig {
            variant: v,
            ..cfg.clone()
        };
        let opts = RunOptions {
            out: out.map(|o| o.join(v.name())),
            exec,
            ..RunOptions::default()
        };
        results.push((v, align(&c, &opts)?));
    }
    if let Some(out) = out {
        let mut lines = vec!["variant,final_elbo,final_mean_reward,final_diversity,final_mode_coverage".to_string()];
        for (v, r) in &results {
            let rec = &r.last().record;
            lines.push(format!(
                "{},{},{},{},{}",
                v.name(),
                rec.elbo,
                rec.mean_reward,
                opt(rec.diversity),
                opt(rec.mode_coverage)
            ));
        }
        write_lines(&out.join("ablation.csv"), &lines)?;
    }
    Ok(results)
}

/// Amortized or posterior-search evaluation of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mode: &'static str,
    pub samples: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub diversity: Option<f64>,
    pub mode_coverage: Option<f64>,
    pub rendered: Vec<String>,
}

impl EvalSummary {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mode,
            self.samples,
            self.mean_reward,
            self.reward_std,
            opt(self.diversity),
            opt(self.mode_coverage)
        )
    }
}

fn eval_generic<P: LabPolicy>(
    cfg: &ExperimentConfig,
    ck: Option<&Checkpoint>,
    n: usize,
    seed_epoch: usize,
    rep: u64,
    exec: Exec,
) -> Result<(EvalSummary, EvalSummary)> {
    let mut anchor = P::pretrained(cfg, exec)?;
    let mut policy = anchor.clone();
    if let Some(ck) = ck {
        match ck.kind {
            CheckpointKind::Run => {
                ck.check_hash(&cfg.hash())?;
                policy.set_params(ck.array("params")?)?;
                anchor.set_params(ck.array("anchor")?)?;
            }
            CheckpointKind::Pretrained => {
                ck.check_hash(&pretrain_hash(cfg)?)?;
                policy.set_params(ck.array("params")?)?;
                anchor = policy.clone();
            }
        }
    }
    let (trs, mean, std, div, cov) = amortized_metrics(&policy, cfg, seed_epoch, rep, n, exec)?;
    let amortized = EvalSummary {
        mode: "amortized",
        samples: n,
        mean_reward: mean,
        reward_std: std,
        diversity: div,
        mode_coverage: cov,
        rendered: trs.iter().map(|t| P::render(t.terminal(), cfg)).collect(),
    };
    let rng = eval_stream(cfg, STREAM_POSTERIOR, seed_epoch, rep);
    let trs = estep_batch(&policy, guide(cfg, &anchor, &policy), &cfg.reward, &cfg.estep, &rng, n, 0, exec)?;
    let rewards: Vec<f64> = trs.iter().map(|t| t.reward).collect();
    let (mean, std) = reward_stats(&rewards);
    let xs: Vec<P::State> = trs.iter().map(|t| t.terminal().clone()).collect();
    let (div, cov) = P::sample_metrics(&xs, cfg)?;
    let posterior = EvalSummary {
        mode: "posterior",
        samples: n,
        mean_reward: mean,
        reward_std: std,
        diversity: div,
        mode_coverage: cov,
        rendered: xs.iter().map(|x| P::render(x, cfg)).collect(),
    };
    Ok((amortized, posterior))
}

/// Evaluates a checkpoint (or the pretrained policy when `None`) with `n`
/// amortized rollouts and `n` posterior searches. Replicate 0 draws the
/// rollouts the training loop used for that epoch's metrics.
pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    n: usize,
    rep: u64,
    out: Option<&Path>,
    exec: Exec,
) -> Result<(EvalSummary, EvalSummary)> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("evaluation needs at least one sample".into()));
    }
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    let epoch = ck.as_ref().map(|c| if c.kind == CheckpointKind::Run { c.epoch } else { 0 }).unwrap_or(0);
    let res = match cfg.world {
        WorldSpec::Continuous(_) => eval_generic::<ContinuousPolicy>(cfg, ck.as_ref(), n, epoch, rep, exec)?,
        WorldSpec::Discrete(_) => eval_generic::<DiscretePolicy>(cfg, ck.as_ref(), n, epoch, rep, exec)?,
    };
    if let Some(out) = out {
        prepare_dir(out, cfg)?;
        let lines = vec![
            "mode,samples,mean_reward,reward_std,diversity,mode_coverage".to_string(),
            res.0.csv(),
            res.1.csv(),
        ];
        write_lines(&out.join("eval.csv"), &lines)?;
        write_lines(&out.join("samples_amortized.txt"), &res.0.rendered)?;
        write_lines(&out.join("samples_posterior.txt"), &res.1.rendered)?;
    }
    Ok(res)
}

/// Pretrains the discrete denoiser and writes `pretrained.ckpt`.
pub fn run_pretrain(cfg: &ExperimentConfig, out: Option<&Path>, exec: Exec) -> Result<PretrainReport> {
    cfg.validate()?;
    let (p, report) = pretrain(cfg, exec)?;
    if let Some(out) = out {
        prepare_dir(out, cfg)?;
        Checkpoint {
            kind: CheckpointKind::Pretrained,
            config_hash: pretrain_hash(cfg)?,
            epoch: 0,
            seed: cfg.seed,
            adam_step: 0,
            arrays: vec![("params".into(), p.params())],
            metrics: Vec::new(),
        }
        .save(&out.join("pretrained.ckpt"))?;
        std::fs::write(out.join("pretrain.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

/// The oracle suite on the pretrained policy of an enumerable config.
pub fn run_oracle(cfg: &ExperimentConfig, opts: &OracleOptions, out: Option<&Path>, exec: Exec) -> Result<OracleReport> {
    cfg.validate()?;
    cfg.require_enumerable()?;
    let base = DiscretePolicy::pretrained(cfg, exec)?;
    let report = oracle::run_oracle(&base, &cfg.reward, &cfg.estep, opts, exec)?;
    if let Some(out) = out {
        prepare_dir(out, cfg)?;
        std::fs::write(out.join("oracle.txt"), format!("{report}\n"))?;
    }
    Ok(report)
}
