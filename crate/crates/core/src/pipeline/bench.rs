//! Wall-time benchmarks of the scan execution forms and of the backbone with
//! and without channel splitting. Timing never feeds back into results:
//! every timed output is digested and compared across repeats, and a full
//! model forward is digested before and after the run.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{scene_seed, sha256_hex};
use crate::backbone::{backbone_flops, Backbone};
use crate::blocks::FlopCount;
use crate::config::RunConfig;
use crate::data_io::generate_scene;
use crate::error::{Error, Result};
use crate::model::PillarMamba;
use crate::rng::Rng64;
use crate::ssm::{
    apply_conv_form, discretize_zoh, scan_kernel, scan_parallel, scan_recurrent, ContinuousSsm, DiscreteSsm,
    ScanParams,
};
use crate::tensor::{Graph, ParamBuilder, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanForm {
    Recurrent,
    Parallel,
    Conv,
}

impl ScanForm {
    pub const ALL: [ScanForm; 3] = [ScanForm::Recurrent, ScanForm::Parallel, ScanForm::Conv];

    pub fn name(self) -> &'static str {
        match self {
            ScanForm::Recurrent => "recurrent",
            ScanForm::Parallel => "parallel",
            ScanForm::Conv => "conv",
        }
    }
}

impl FromStr for ScanForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScanForm::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scan form {s:?}; known: recurrent, parallel, conv")))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingStats {
    /// `scan` or `block`.
    pub kind: &'static str,
    pub name: String,
    pub repeat: usize,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub std_ms: f64,
    /// Analytic multiply-accumulates of one run.
    pub macs: u64,
    /// Digest of the output; identical on every repeat.
    pub digest: String,
}

impl TimingStats {
    fn from_samples(kind: &'static str, name: String, samples: &[f64], macs: u64, digest: String) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            kind,
            name,
            repeat: samples.len(),
            mean_ms: mean,
            min_ms: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples.iter().copied().fold(0.0, f64::max),
            std_ms: var.sqrt(),
            macs,
            digest,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub grid: (usize, usize),
    pub channels: usize,
    /// Scan workload: one sequence per HSB scan over the full grid.
    pub seq_len: usize,
    pub scan_channels: usize,
    pub state_dim: usize,
    pub partition: usize,
    pub scans: Vec<TimingStats>,
    /// Largest deviation of any form from the recurrent reference.
    pub scan_max_deviation: f64,
    pub blocks: Vec<TimingStats>,
    pub flops: BTreeMap<String, FlopCount>,
    pub model_digest_before: String,
    pub model_digest_after: String,
    /// Every repeat reproduced its digest and the model output is unchanged.
    pub digest_stable: bool,
}

impl BenchReport {
    pub fn timing(&self, name: &str) -> Option<&TimingStats> {
        self.scans.iter().chain(&self.blocks).find(|t| t.name == name)
    }

    /// One row per timing, columns in [`TimingStats`] field order.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for t in self.scans.iter().chain(&self.blocks) {
            w.serialize(t).map_err(|e| Error::Json(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Json(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Times `f` `repeat` times after one warm-up call, requiring the same
/// output digest every time.
fn time_it(repeat: usize, mut f: impl FnMut() -> Result<Vec<u8>>) -> Result<(Vec<f64>, String, bool)> {
    let first = sha256_hex(&f()?);
    let mut samples = Vec::with_capacity(repeat);
    let mut stable = true;
    for _ in 0..repeat {
        let t = Instant::now();
        let out = f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        stable &= sha256_hex(&out) == first;
    }
    Ok((samples, first, stable))
}

fn model_digest(cfg: &RunConfig, seed: u64) -> Result<String> {
    let (cloud, _) = generate_scene(&cfg.scene, &cfg.grid, scene_seed(seed, 0))?;
    let (model, store) = PillarMamba::init::<f32>(cfg, seed)?;
    Ok(sha256_hex(&model.infer(&store, &cloud)?.to_le_bytes()))
}

fn random_invariant(rng: &mut Rng64, d: usize, m: usize, cfg: &RunConfig) -> Result<Vec<DiscreteSsm<f64>>> {
    (0..d)
        .map(|_| {
            let cont = ContinuousSsm {
                a: (0..m).map(|_| -rng.uniform(0.1, 1.0)).collect(),
                b: (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                c: (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                delta: rng.uniform(0.01, 0.1),
            };
            discretize_zoh(&cont, cfg.model.ssm.zoh)
        })
        .collect()
}

/// Benchmarks the requested scan forms on an HSB-sized workload and the
/// backbone with CSG on and off, `repeat` timed runs each.
pub fn bench(cfg: &RunConfig, forms: &[ScanForm], repeat: usize, seed: u64) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::Config("bench repeat must be positive".into()));
    }
    cfg.validate()?;
    let (x, y) = cfg.grid.extents()?;
    let c = cfg.model.channels;
    let model_digest_before = model_digest(cfg, seed)?;
    let mut stable = true;

    let inner = if cfg.model.csg.enabled {
        cfg.model.csg.branch_channels(c)?
    } else {
        c
    } / cfg.model.hsb.reduction;
    let (len, d, m) = (x * y, inner.max(1), cfg.model.ssm.state_dim);
    let mut rng = Rng64::new(seed);
    let sets = random_invariant(&mut rng, d, m, cfg)?;
    let xs = Tensor::from_fn(&[len, d], |_| rng.uniform(-1.0, 1.0));
    let params = ScanParams::Invariant(&sets);
    let reference = scan_recurrent(params, &xs)?;
    let partition = cfg.model.scan_partition;
    let mut scans = Vec::new();
    let mut deviation: f64 = 0.0;
    for &form in forms {
        let run = || -> Result<Tensor<f64>> {
            match form {
                ScanForm::Recurrent => scan_recurrent(params, &xs),
                ScanForm::Parallel => scan_parallel(params, &xs, partition),
                ScanForm::Conv => apply_conv_form(&xs, &scan_kernel(params, len)?),
            }
        };
        deviation = deviation.max(run()?.max_abs_diff(&reference));
        let (samples, digest, ok) = time_it(repeat, || Ok(run()?.to_le_bytes()))?;
        stable &= ok;
        let macs = match form {
            ScanForm::Conv => (d * m * len + d * len * (len + 1) / 2) as u64,
            _ => (3 * d * m * len) as u64,
        };
        scans.push(TimingStats::from_samples("scan", form.name().into(), &samples, macs, digest));
    }

    let mut blocks = Vec::new();
    let mut flops = BTreeMap::new();
    for enabled in [true, false] {
        let mut bcfg = cfg.model.backbone();
        bcfg.csg.enabled = enabled;
        let name = if enabled { "backbone_csg" } else { "backbone_no_csg" };
        let mut pb = ParamBuilder::new();
        let backbone = Backbone::build(&mut pb, &bcfg, x, y)?;
        let store = pb.materialize::<f32>(&mut Rng64::new(seed));
        let mut irng = Rng64::new(seed ^ 1);
        let input = Tensor::from_fn(&[1, c, x, y], |_| irng.uniform(-1.0, 1.0) as f32);
        let (samples, digest, ok) = time_it(repeat, || {
            let mut g = Graph::with_params(&store);
            let v = g.leaf(input.clone());
            let p = backbone.forward(&mut g, v)?;
            Ok(g.value(p.fused).to_le_bytes())
        })?;
        stable &= ok;
        let f = backbone_flops(&bcfg, x, y)?;
        flops.insert(name.to_string(), f);
        blocks.push(TimingStats::from_samples("block", name.into(), &samples, f.total(), digest));
    }

    let model_digest_after = model_digest(cfg, seed)?;
    stable &= model_digest_before == model_digest_after;
    Ok(BenchReport {
        grid: (x, y),
        channels: c,
        seq_len: len,
        scan_channels: d,
        state_dim: m,
        partition,
        scans,
        scan_max_deviation: deviation,
        blocks,
        flops,
        model_digest_before,
        model_digest_after,
        digest_stable: stable,
    })
}
