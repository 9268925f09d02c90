//! Minibatch SGD with heavy-ball momentum, checkpoints and the metrics ledger.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{labeled_batch, unlabeled_batch, Reader, SemiDataset};
use crate::error::{Error, Result};
use crate::eval::{task_loss, test_nll, TaskMetric};
use crate::nn::{ModelDims, ModelParams};
use crate::noise::{hash_key, CounterNoise, Stream};
use crate::objectives::{full_loss, hybrid_loss, EstimatorConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Labeled pairs only (F-VAE).
    Full,
    /// Labeled pairs plus unlabeled images (H-VAE).
    Hybrid,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected full or hybrid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the step budget below `epochs` worth of steps.
    pub max_steps: Option<u64>,
    pub mode: Mode,
    pub estimator: EstimatorConfig,
    pub seed: u64,
    pub eval_every: u64,
    /// Rescales each minibatch gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    /// Fills the ledger's wall-clock column (which makes ledgers differ between runs).
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            momentum: 0.9,
            batch_size: 32,
            epochs: 400,
            max_steps: None,
            mode: Mode::Hybrid,
            estimator: EstimatorConfig::default(),
            seed: 0,
            eval_every: 700,
            max_grad_norm: Some(1000.0),
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Config(format!("max_grad_norm must be finite and > 0, got {c}")));
            }
        }
        EstimatorConfig::new(self.estimator.s_z, self.estimator.s_h).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// `epochs · ⌈n / batch_size⌉`, capped by `max_steps`.
    pub fn total_steps(&self, n: usize) -> u64 {
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        let budget = self.epochs as u64 * per_epoch;
        self.max_steps.map_or(budget, |cap| budget.min(cap))
    }
}

/// Scales all blocks by one factor so their joint L2 norm is at most `cap`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], cap: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > cap {
        let k = cap / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// `v ← momentum·v + g; θ ← θ − lr·v` for one block.
pub fn sgd_update(theta: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) -> Result<()> {
    if theta.shape() != grad.shape() || theta.shape() != velocity.shape() {
        return Err(Error::shape(
            "sgd_step",
            format!("param {:?}, grad {:?}, velocity {:?}", theta.shape(), grad.shape(), velocity.shape()),
        ));
    }
    for ((t, g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *t -= lr * *v;
    }
    Ok(())
}

/// Momentum step over every parameter block; shapes are checked before any
/// block is touched.
pub fn sgd_step(params: &mut ModelParams, grads: &[Tensor], velocity: &mut [Tensor], lr: f64, momentum: f64) -> Result<()> {
    let n = params.block_count();
    if grads.len() != n || velocity.len() != n {
        return Err(Error::shape("sgd_step", format!("{n} blocks, {} grads, {} velocities", grads.len(), velocity.len())));
    }
    for (i, (name, p)) in params.blocks().iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != velocity[i].shape() {
            return Err(Error::shape("sgd_step", format!("block {name}: {:?} vs {:?} / {:?}", p.shape(), grads[i].shape(), velocity[i].shape())));
        }
    }
    for i in 0..n {
        sgd_update(params.block_mut(i), &grads[i], &mut velocity[i], lr, momentum)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HVCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity/";

/// Parameters, optimizer velocity and the position in the noise/batch
/// streams (which are keyed by `(seed, step)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub velocity: Vec<Tensor>,
    pub step: u64,
    pub seed: u64,
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_block(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let len = r.u32("block name length")? as usize;
    let name = String::from_utf8(r.take(len, "block name")?.to_vec()).map_err(|_| Error::Malformed("block name is not UTF-8".into()))?;
    let rank = r.u32("block rank")? as usize;
    if rank > 8 {
        return Err(Error::Malformed(format!("block {name} has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let e = r.u64("block extent")? as usize;
        count = count.checked_mul(e).ok_or_else(|| Error::Malformed(format!("block {name} is too large")))?;
        shape.push(e);
    }
    let data = r.f64s(count, "block data")?;
    Ok((name, Tensor::new(&shape, data)?))
}

impl Checkpoint {
    /// Fresh state at step 0 with zero velocity.
    pub fn new(params: ModelParams, seed: u64) -> Self {
        let velocity = params.blocks().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Checkpoint { params, velocity, step: 0, seed }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.params.dims();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for d in [dims.d_dim, dims.h_dim, dims.z_dim] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let blocks = self.params.blocks();
        out.extend_from_slice(&((blocks.len() + self.velocity.len()) as u32).to_le_bytes());
        for (name, t) in blocks {
            put_block(&mut out, name, t);
        }
        for ((name, _), v) in blocks.iter().zip(&self.velocity) {
            put_block(&mut out, &format!("{VELOCITY_PREFIX}{name}"), v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, supported: CHECKPOINT_VERSION });
        }
        let d = r.u32("d_dim")? as usize;
        let h = r.u32("h_dim")? as usize;
        let z = r.u32("z_dim")? as usize;
        let dims = ModelDims::new(d, h, z)?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let count = r.u32("block count")? as usize;
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let (name, t) = get_block(&mut r)?;
            match name.strip_prefix(VELOCITY_PREFIX) {
                Some(rest) => velocity.push((rest.to_string(), t)),
                None => params.push((name, t)),
            }
        }
        r.finish()?;
        if velocity.len() != params.len()
            || velocity.iter().zip(&params).any(|((vn, vt), (pn, pt))| vn != pn || vt.shape() != pt.shape())
        {
            return Err(Error::Malformed("velocity blocks do not mirror the parameter blocks".into()));
        }
        let params = ModelParams::from_blocks(dims, params)?;
        Ok(Checkpoint { params, velocity: velocity.into_iter().map(|(_, t)| t).collect(), step, seed })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Loads and rejects a checkpoint whose dimensions differ from `dims`.
    pub fn load_expecting(path: impl AsRef<Path>, dims: ModelDims) -> Result<Self> {
        let c = Checkpoint::load(path)?;
        if c.params.dims() != dims {
            return Err(Error::Config(format!("checkpoint dims {:?} do not match expected {:?}", c.params.dims(), dims)));
        }
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// Ledger

pub const LEDGER_HEADER: &str = "step,mode,n,m,train_loss,test_nll,task_loss,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub mode: Mode,
    pub n: usize,
    pub m: usize,
    pub train_loss: Option<f64>,
    pub test_nll: f64,
    pub task_loss: Option<f64>,
    pub seconds: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mode.as_str(),
            self.n,
            self.m,
            opt(self.train_loss),
            self.test_nll,
            opt(self.task_loss),
            opt(self.seconds)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Malformed(format!("ledger row has {} fields: {line:?}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Malformed(format!("bad number {s:?} in ledger")));
        let int = |s: &str| s.parse::<u64>().map_err(|_| Error::Malformed(format!("bad integer {s:?} in ledger")));
        let optn = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(MetricsRow {
            step: int(f[0])?,
            mode: f[1].parse()?,
            n: int(f[2])? as usize,
            m: int(f[3])? as usize,
            train_loss: optn(f[4])?,
            test_nll: num(f[5])?,
            task_loss: optn(f[6])?,
            seconds: optn(f[7])?,
        })
    }
}

/// Header plus one line per row.
pub fn ledger_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

pub fn write_ledger(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ledger_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_ledger(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(LEDGER_HEADER);
        s.push('\n');
    }
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LEDGER_HEADER) {
        return Err(Error::Malformed(format!("{} does not start with the ledger header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

// ---------------------------------------------------------------------------
// Training loop

const LABELED_POOL: u64 = 0x1AB;
const UNLABELED_POOL: u64 = 0x2AB;

fn draw_indices(seed: u64, pool: u64, step: u64, len: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(&[seed, pool, step]));
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// Task metric for a dataset: interocular error for landmark scenes, plain
/// L2 when images are depth maps.
pub fn task_metric_for(ds: &SemiDataset) -> TaskMetric {
    if ds.meta.masked {
        TaskMetric::L2
    } else {
        TaskMetric::Interocular
    }
}

/// Test NLL (and, in hybrid mode, task loss) of `params` on `ds.test`. The
/// evaluation noise is fixed per seed so rows from different steps compare
/// like for like.
pub fn metrics_row(ds: &SemiDataset, params: &ModelParams, cfg: &TrainConfig, step: u64, train_loss: Option<f64>) -> Result<MetricsRow> {
    let noise = CounterNoise::new(cfg.seed, Stream::Eval, 0);
    let nll = test_nll(params, &ds.test, cfg.estimator, &noise)?;
    let (m, task) = match cfg.mode {
        Mode::Full => (0, None),
        Mode::Hybrid => (ds.unlabeled.len(), Some(task_loss(params, &ds.test, task_metric_for(ds))?)),
    };
    Ok(MetricsRow { step, mode: cfg.mode, n: ds.labeled.len(), m, train_loss, test_nll: nll, task_loss: task, seconds: None })
}

/// Drives SGD over a [`SemiDataset`]. All randomness is keyed by
/// `(seed, step)`, so a trainer rebuilt from a checkpoint continues the
/// exact trajectory.
pub struct Trainer<'a> {
    ds: &'a SemiDataset,
    cfg: TrainConfig,
    state: Checkpoint,
    total: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a SemiDataset, cfg: TrainConfig, params: ModelParams) -> Result<Self> {
        let seed = cfg.seed;
        Trainer::resume(ds, cfg, Checkpoint::new(params, seed))
    }

    pub fn resume(ds: &'a SemiDataset, cfg: TrainConfig, state: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if state.seed != cfg.seed {
            return Err(Error::Config(format!("checkpoint seed {} differs from config seed {}", state.seed, cfg.seed)));
        }
        if ds.labeled.is_empty() {
            return Err(Error::Config("training needs at least one labeled record".into()));
        }
        if cfg.mode == Mode::Hybrid && ds.unlabeled.is_empty() {
            return Err(Error::Config("hybrid mode needs at least one unlabeled record (m ≥ 1)".into()));
        }
        let dims = state.params.dims();
        if dims.d_dim != ds.d_dim() || dims.h_dim != ds.h_dim() {
            return Err(Error::Config(format!(
                "model expects d={}, h={} but the dataset has d={}, h={}",
                dims.d_dim,
                dims.h_dim,
                ds.d_dim(),
                ds.h_dim()
            )));
        }
        if ds.meta.masked != state.params.specs().has_mask() {
            return Err(Error::Config("masked datasets need a model with a mask head and vice versa".into()));
        }
        let total = cfg.total_steps(ds.labeled.len());
        Ok(Trainer { ds, cfg, state, total, started: Instant::now() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn step_index(&self) -> u64 {
        self.state.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    /// One SGD step; returns the minibatch loss and the gradients it applied.
    pub fn step(&mut self) -> Result<(f64, Vec<Tensor>)> {
        let s = self.state.step;
        let b = self.cfg.batch_size;
        let li = draw_indices(self.cfg.seed, LABELED_POOL, s, self.ds.labeled.len(), b);
        let lab = labeled_batch(&li.iter().map(|&i| &self.ds.labeled[i]).collect::<Vec<_>>())?;
        let noise = CounterNoise::new(self.cfg.seed, Stream::Train, s);
        let tape = Tape::new();
        let vars = self.state.params.bind(&tape, true);
        let loss = match self.cfg.mode {
            Mode::Full => full_loss(&vars, &lab, self.cfg.estimator, &noise)?,
            Mode::Hybrid => {
                let ui = draw_indices(self.cfg.seed, UNLABELED_POOL, s, self.ds.unlabeled.len(), b);
                let unl = unlabeled_batch(&ui.iter().map(|&i| &self.ds.unlabeled[i]).collect::<Vec<_>>())?;
                hybrid_loss(&vars, &lab, &unl, self.cfg.estimator, &noise)?
            }
        };
        let value = loss.value.item()?;
        if !value.is_finite() {
            let term = match (loss.full.map(|v| v.item()), loss.partial.map(|v| v.item())) {
                (Some(Ok(f)), _) if !f.is_finite() => "L_F",
                (_, Some(Ok(p))) if !p.is_finite() => "L_P",
                _ => "loss",
            };
            return Err(Error::NonFinite { step: s, term });
        }
        tape.backward(loss.value)?;
        let mut grads = vars.grads();
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { step: s, term: "gradient" });
        }
        if let Some(cap) = self.cfg.max_grad_norm {
            clip_global_norm(&mut grads, cap);
        }
        drop(vars);
        sgd_step(&mut self.state.params, &grads, &mut self.state.velocity, self.cfg.learning_rate, self.cfg.momentum)?;
        self.state.step += 1;
        Ok((value, grads))
    }

    /// Ledger row for the current parameters.
    pub fn evaluate(&self, train_loss: Option<f64>) -> Result<MetricsRow> {
        let mut row = metrics_row(self.ds, &self.state.params, &self.cfg, self.state.step, train_loss)?;
        row.seconds = self.cfg.record_time.then(|| self.started.elapsed().as_secs_f64());
        Ok(row)
    }

    fn due(&self, step: u64) -> bool {
        step.is_multiple_of(self.cfg.eval_every) || step == self.total
    }

    /// Steps until `until` (clamped to the budget), returning the ledger rows
    /// due along the way. A trainer at step 0 first records the initial state.
    pub fn run_until(&mut self, until: u64) -> Result<Vec<MetricsRow>> {
        let until = until.min(self.total);
        let mut rows = Vec::new();
        if self.state.step == 0 {
            rows.push(self.evaluate(None)?);
        }
        while self.state.step < until {
            let (loss, _) = self.step()?;
            if self.due(self.state.step) {
                rows.push(self.evaluate(Some(loss))?);
            }
        }
        Ok(rows)
    }

    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        self.run_until(self.total)
    }
}

/// Trains from `params` for the configured budget.
pub fn train(ds: &SemiDataset, cfg: TrainConfig, params: ModelParams) -> Result<(Checkpoint, Vec<MetricsRow>)> {
    let mut t = Trainer::new(ds, cfg, params)?;
    let rows = t.run()?;
    Ok((t.into_checkpoint(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SceneConfig;
    use crate::nn::NetworkSpecs;

    fn tiny_ds(m: usize) -> SemiDataset {
        let scene = SceneConfig { image_side: 6, num_landmarks: 2, ..SceneConfig::default() };
        SemiDataset::synthesize(&scene, 12, m, 8).unwrap()
    }

    fn tiny_params(ds: &SemiDataset) -> ModelParams {
        let dims = ModelDims::new(ds.d_dim(), ds.h_dim(), 2).unwrap();
        ModelParams::init(dims, NetworkSpecs::standard(dims, 8, false), 1).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { batch_size: 4, epochs: 2, eval_every: 2, estimator: EstimatorConfig::new(1, 1).unwrap(), ..TrainConfig::default() }
    }

    #[test]
    fn sgd_examples() {
        let mut t = Tensor::vector(vec![1.0]);
        let mut v = Tensor::vector(vec![0.0]);
        sgd_update(&mut t, &Tensor::vector(vec![0.5]), &mut v, 0.01, 0.0).unwrap();
        assert_eq!(t.data(), &[0.995]);

        let (mut a, mut va) = (Tensor::vector(vec![2.0]), Tensor::vector(vec![0.0]));
        let (mut b, mut vb) = (Tensor::vector(vec![2.0]), Tensor::vector(vec![0.0]));
        sgd_update(&mut a, &Tensor::vector(vec![0.3]), &mut va, 0.1, 0.9).unwrap();
        sgd_update(&mut b, &Tensor::vector(vec![0.3]), &mut vb, 0.1, 0.0).unwrap();
        assert_eq!(a, b);

        let mut c = Tensor::vector(vec![4.0]);
        sgd_update(&mut c, &Tensor::vector(vec![0.0]), &mut Tensor::vector(vec![0.0]), 0.1, 0.9).unwrap();
        assert_eq!(c.data(), &[4.0]);

        let bad = sgd_update(&mut c, &Tensor::vector(vec![0.0, 1.0]), &mut Tensor::vector(vec![0.0]), 0.1, 0.9);
        assert!(matches!(bad, Err(Error::Shape { .. })));
    }

    #[test]
    fn momentum_accumulates() {
        let mut t = Tensor::vector(vec![0.0]);
        let mut v = Tensor::vector(vec![0.0]);
        for _ in 0..2 {
            sgd_update(&mut t, &Tensor::vector(vec![1.0]), &mut v, 1.0, 0.5).unwrap();
        }
        assert_eq!((t.data()[0], v.data()[0]), (-2.5, 1.5));
    }

    #[test]
    fn sgd_step_checks_every_block_first() {
        let ds = tiny_ds(4);
        let mut p = tiny_params(&ds);
        let before = p.clone();
        let mut grads: Vec<Tensor> = p.blocks().iter().map(|(_, t)| Tensor::filled(t.shape(), 1.0)).collect();
        let last = grads.len() - 1;
        grads[last] = Tensor::zeros(&[1]);
        let mut vel: Vec<Tensor> = p.blocks().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        assert!(sgd_step(&mut p, &grads, &mut vel, 0.1, 0.9).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejections() {
        let ds = tiny_ds(4);
        let mut c = Checkpoint::new(tiny_params(&ds), 9);
        c.step = 17;
        c.velocity[0].data_mut()[0] = 0.25;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Version { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::BadMagic { .. })));
        let mut dims = bytes;
        dims[8] += 1;
        assert!(Checkpoint::from_bytes(&dims).is_err());
    }

    #[test]
    fn ledger_row_roundtrip() {
        let r = MetricsRow { step: 3, mode: Mode::Hybrid, n: 2, m: 5, train_loss: Some(1.5), test_nll: -0.1, task_loss: None, seconds: None };
        assert_eq!(r.to_csv(), "3,hybrid,2,5,1.5,-0.1,,");
        assert_eq!(MetricsRow::from_csv(&r.to_csv()).unwrap(), r);
        assert!(MetricsRow::from_csv("1,full,2").is_err());
    }

    #[test]
    fn ledger_cadence_and_modes() {
        let ds = tiny_ds(6);
        let (_, rows) = train(&ds, cfg(), tiny_params(&ds)).unwrap();
        let steps: Vec<u64> = rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 2, 4, 6]);
        assert!(rows[0].train_loss.is_none() && rows[1].train_loss.is_some());
        assert!(rows.iter().all(|r| r.task_loss.is_some() && r.m == 6));

        let full = TrainConfig { mode: Mode::Full, max_steps: Some(3), ..cfg() };
        let (_, rows) = train(&ds, full, tiny_params(&ds)).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 2, 3]);
        assert!(rows.iter().all(|r| r.task_loss.is_none() && r.m == 0));
    }

    #[test]
    fn hybrid_requires_unlabeled_data() {
        let ds = tiny_ds(0);
        assert!(matches!(Trainer::new(&ds, cfg(), tiny_params(&ds)), Err(Error::Config(_))));
        assert!(Trainer::new(&ds, TrainConfig { mode: Mode::Full, ..cfg() }, tiny_params(&ds)).is_ok());
    }

    #[test]
    fn zero_budget_and_zero_rate_keep_initialization() {
        let ds = tiny_ds(4);
        let p = tiny_params(&ds);
        let (c, rows) = train(&ds, TrainConfig { mode: Mode::Full, epochs: 0, ..cfg() }, p.clone()).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(rows.len(), 1);
        let (c, _) = train(&ds, TrainConfig { learning_rate: 0.0, ..cfg() }, p.clone()).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.step, 6);
    }

    #[test]
    fn predictor_receives_gradient_in_hybrid_mode() {
        let ds = tiny_ds(6);
        let mut t = Trainer::new(&ds, cfg(), tiny_params(&ds)).unwrap();
        let (_, grads) = t.step().unwrap();
        let max = t
            .checkpoint()
            .params
            .blocks()
            .iter()
            .zip(&grads)
            .filter(|((n, _), _)| n.starts_with("predictor."))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        assert!(max > 0.0);
    }

    #[test]
    fn divergence_names_the_term() {
        let ds = tiny_ds(4);
        let mut p = tiny_params(&ds);
        let i = p.blocks().iter().position(|(n, _)| n == "predictor.2.bias").unwrap();
        p.block_mut(i).data_mut()[0] = f64::NAN;
        let mut t = Trainer::new(&ds, cfg(), p).unwrap();
        match t.step() {
            Err(Error::NonFinite { step: 0, term }) => assert_eq!(term, "L_P"),
            other => panic!("expected a non-finite error, got {:?}", other.map(|r| r.0)),
        }
    }
}
