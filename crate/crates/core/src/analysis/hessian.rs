use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{MaskPlan, MimModel};
use crate::nn::{Graph, ParamId};
use crate::report::{Provenance, Table};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Hessian-vector product by central differences of the gradient along
/// `v / ||v||`, with step `1e-4 · (1 + ||θ||∞)`.
pub fn hvp<G>(grad: &mut G, theta: &[f64], v: &[f64]) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != theta.len() {
        return Err(Error::invalid(
            "hvp",
            format!("direction of length {} for {} parameters", v.len(), theta.len()),
        ));
    }
    let vn = norm(v);
    if vn == 0.0 || !vn.is_finite() {
        return Err(Error::Domain {
            op: "hvp",
            msg: format!("direction norm {vn}"),
        });
    }
    let delta = 1e-4 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let step = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, x)| t + sign * delta * x / vn).collect() };
    let plus = grad(&step(1.0))?;
    let minus = grad(&step(-1.0))?;
    if plus.len() != theta.len() || minus.len() != theta.len() {
        return Err(Error::invalid("hvp", "gradient length differs from parameter length"));
    }
    let scale = vn / (2.0 * delta);
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) * scale).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerIteration {
    /// Dominant eigenvalue by magnitude, signed by the Rayleigh quotient.
    pub lambda_max: f64,
    pub iters: usize,
    pub converged: bool,
    /// `||Hv - λv||` for the final unit vector.
    pub residual: f64,
}

/// Power iteration on [`hvp`] from a random unit start. Stops once
/// successive Rayleigh quotients differ by at most `tol · max(1, |λ|)`.
/// A vanishing `Hv` ends the iteration unconverged rather than failing.
pub fn max_eigenvalue<G>(
    grad: &mut G,
    theta: &[f64],
    max_iters: usize,
    tol: f64,
    rng: &mut Rng,
) -> Result<PowerIteration>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if theta.is_empty() || max_iters == 0 {
        return Err(Error::invalid(
            "max_eigenvalue",
            "need parameters and at least one iteration",
        ));
    }
    let mut v: Vec<f64> = (0..theta.len()).map(|_| rng.normal()).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    let mut prev: Option<f64> = None;
    let mut out = PowerIteration {
        lambda_max: 0.0,
        iters: 0,
        converged: false,
        residual: f64::NAN,
    };
    for k in 1..=max_iters {
        let hv = hvp(grad, theta, &v)?;
        let lambda = dot(&v, &hv);
        let residual = hv
            .iter()
            .zip(&v)
            .map(|(h, x)| (h - lambda * x).powi(2))
            .sum::<f64>()
            .sqrt();
        out = PowerIteration {
            lambda_max: lambda,
            iters: k,
            converged: false,
            residual,
        };
        let hn = norm(&hv);
        if hn == 0.0 || !hn.is_finite() {
            return Ok(out);
        }
        if let Some(p) = prev {
            if (lambda - p).abs() <= tol * p.abs().max(1.0) {
                out.converged = true;
                return Ok(out);
            }
        }
        prev = Some(lambda);
        v = hv.iter().map(|x| x / hn).collect();
    }
    Ok(out)
}

/// A mini-batch frozen together with its targets and mask plans.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedBatch {
    pub images: Tensor,
    pub targets: Tensor,
    pub plans: Vec<MaskPlan>,
}

/// Draws `count` batches and their mask plans from `seed` alone, so models
/// of different architecture are probed on identical data and masks.
pub fn fixed_batches(
    model: &MimModel,
    teacher: Option<&MimModel>,
    data: &Dataset,
    count: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<FixedBatch>> {
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::invalid(
            "fixed_batches",
            format!("batch size {batch_size} for {} images", data.len()),
        ));
    }
    let mut rng = Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut order: Vec<usize> = (0..data.len()).collect();
            rng.shuffle(&mut order);
            let images = data.batch(&order[..batch_size]);
            let plans = model.draw_plans(batch_size, &mut rng)?;
            let targets = model.targets(&images, teacher)?;
            Ok(FixedBatch { images, targets, plans })
        })
        .collect()
}

/// Which parameters span the probed Hessian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HessianScope {
    #[default]
    All,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub scope: HessianScope,
    /// Seeds the start vector of batch `i` as stream `i`.
    pub seed: u64,
}

impl Default for HessianOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-3,
            scope: HessianScope::All,
            seed: 0,
        }
    }
}

/// Loss gradient of `model` on a fixed batch as a function of the flattened
/// parameters `ids`. The model itself is never modified.
pub fn loss_gradient<'a>(
    model: &'a MimModel,
    batch: &'a FixedBatch,
    ids: &'a [ParamId],
) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a {
    let mut work = model.clone();
    move |theta: &[f64]| {
        work.params.unflatten(ids, theta);
        let mut g = Graph::new(&work.params);
        let fwd = work.forward_with_plans(&mut g, &batch.images, &batch.targets, &batch.plans)?;
        let grads = g.backward(fwd.loss)?;
        let grads = g.param_grads(&grads);
        Ok(ids
            .iter()
            .flat_map(|id| grads[id.index()].data().iter().copied())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianRecord {
    pub batch: usize,
    pub lambda_max: f64,
    pub iters: usize,
    pub converged: bool,
    pub residual: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianReport {
    pub records: Vec<HessianRecord>,
}

impl HessianReport {
    fn successes(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().filter(|r| r.error.is_none()).map(|r| r.lambda_max)
    }

    /// Mean λ_max over batches that completed.
    pub fn mean(&self) -> Option<f64> {
        let v: Vec<f64> = self.successes().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Completed λ_max values in ascending order.
    pub fn sorted(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.successes().collect();
        v.sort_by(f64::total_cmp);
        v
    }

    /// `batch,lambda_max,iters,converged,residual`; failed batches carry NaN.
    pub fn to_table(&self, provenance: Option<Provenance>) -> Table {
        let header = ["batch", "lambda_max", "iters", "converged", "residual"]
            .map(String::from)
            .to_vec();
        let mut table = Table::new(provenance, header);
        for r in &self.records {
            table.push(vec![
                r.batch as f64,
                r.lambda_max,
                r.iters as f64,
                if r.converged { 1.0 } else { 0.0 },
                r.residual,
            ]);
        }
        table
    }
}

/// λ_max on every batch. A failing batch is recorded and the rest proceed.
pub fn hessian_spectrum(model: &MimModel, batches: &[FixedBatch], opts: &HessianOptions) -> HessianReport {
    let ids: Vec<ParamId> = match opts.scope {
        HessianScope::All => model.params.ids().collect(),
        HessianScope::Encoder => model.encoder_param_ids(),
    };
    let theta = model.params.flatten(&ids);
    let records = batches
        .iter()
        .enumerate()
        .map(|(i, batch)| {
            let mut grad = loss_gradient(model, batch, &ids);
            let mut rng = Rng::stream(opts.seed, i as u64);
            match max_eigenvalue(&mut grad, &theta, opts.max_iters, opts.tol, &mut rng) {
                Ok(p) => HessianRecord {
                    batch: i,
                    lambda_max: p.lambda_max,
                    iters: p.iters,
                    converged: p.converged,
                    residual: p.residual,
                    error: None,
                },
                Err(e) => HessianRecord {
                    batch: i,
                    lambda_max: f64::NAN,
                    iters: 0,
                    converged: false,
                    residual: f64::NAN,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    HessianReport { records }
}
