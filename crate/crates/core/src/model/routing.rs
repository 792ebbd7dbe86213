//! Neighborhood routing as a single fused tape operation.
//!
//! Channels are stored side by side: a row of the N×(M·Δ) input holds the M
//! unit vectors `z_{u,1} … z_{u,M}`. Every iteration recomputes, for each
//! directed edge (u, v), a softmax over channels of `⟨z_{v,m}, c_{u,m}⟩` and
//! moves every center to the normalized sum of its own unit and the weighted
//! neighbor units. An optional temperature divides the softmax logits; the
//! default of 1 leaves them unscaled.

use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::{BackwardRule, Tape, Value, NORMALIZE_EPS};
use crate::error::{Error, Result};
use crate::graph::CsrGraph;
use crate::Matrix;

/// Intermediate values of a routing run, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RoutingTrace {
    pub channels: usize,
    pub temperature: f64,
    /// `centers[t]` is `c^t`; `centers[0]` is the input.
    pub centers: Vec<Matrix>,
    /// `probs[t-1]` is an nnz×M matrix aligned with the CSR entries.
    pub probs: Vec<Matrix>,
    /// `norms[t-1][[u, m]] = ‖s_{u,m}‖` before clamping.
    pub norms: Vec<Matrix>,
}

impl RoutingTrace {
    pub fn output(&self) -> &Matrix {
        self.centers.last().expect("at least the input")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs `iterations` rounds of routing over `g` on concatenated channel data.
pub fn route(z: &Matrix, g: &CsrGraph, channels: usize, iterations: usize) -> Result<RoutingTrace> {
    route_tempered(z, g, channels, iterations, 1.0)
}

/// As [`route`] with the softmax logits divided by `temperature`.
pub fn route_tempered(
    z: &Matrix,
    g: &CsrGraph,
    channels: usize,
    iterations: usize,
    temperature: f64,
) -> Result<RoutingTrace> {
    let (n, width) = z.dim();
    if n != g.num_nodes() {
        return Err(Error::Shape {
            op: "neighborhood_routing",
            left: (g.num_nodes(), g.num_nodes()),
            right: (n, width),
        });
    }
    if channels == 0 || width % channels != 0 {
        return Err(Error::param(format!("{channels} channels do not divide width {width}")));
    }
    if iterations == 0 {
        return Err(Error::param("routing needs at least one iteration"));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::param(format!("routing temperature must be positive, got {temperature}")));
    }
    let inv_tau = 1.0 / temperature;
    let delta = width / channels;
    let zs = z.as_standard_layout();
    let zs = zs.as_slice().expect("standard layout");
    let mut centers = vec![z.as_standard_layout().into_owned()];
    let mut probs = Vec::with_capacity(iterations);
    let mut norms = Vec::with_capacity(iterations);
    let mut logits = vec![0.0; channels];
    for _ in 0..iterations {
        let prev = centers.last().expect("non-empty").as_slice().expect("standard layout");
        let mut p = vec![0.0; g.nnz() * channels];
        let mut s = zs.to_vec();
        let mut e = 0;
        for u in 0..n {
            let cu = &prev[u * width..(u + 1) * width];
            let su = &mut s[u * width..(u + 1) * width];
            for &v in g.neighbors(u) {
                let zv = &zs[v * width..(v + 1) * width];
                for (m, l) in logits.iter_mut().enumerate() {
                    let r = m * delta..(m + 1) * delta;
                    *l = dot(&zv[r.clone()], &cu[r]) * inv_tau;
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let pe = &mut p[e * channels..(e + 1) * channels];
                let mut total = 0.0;
                for (pm, l) in pe.iter_mut().zip(&logits) {
                    *pm = (l - max).exp();
                    total += *pm;
                }
                for (m, pm) in pe.iter_mut().enumerate() {
                    *pm /= total;
                    let r = m * delta..(m + 1) * delta;
                    for (a, b) in su[r.clone()].iter_mut().zip(&zv[r]) {
                        *a += *pm * b;
                    }
                }
                e += 1;
            }
        }
        let mut norm = vec![0.0; n * channels];
        for (u, su) in s.chunks_exact_mut(width).enumerate() {
            for (m, block) in su.chunks_exact_mut(delta).enumerate() {
                let r = dot(block, block).sqrt();
                norm[u * channels + m] = r;
                let inv = 1.0 / r.max(NORMALIZE_EPS);
                block.iter_mut().for_each(|x| *x *= inv);
            }
        }
        centers.push(Array2::from_shape_vec((n, width), s).expect("sized"));
        probs.push(Array2::from_shape_vec((g.nnz(), channels), p).expect("sized"));
        norms.push(Array2::from_shape_vec((n, channels), norm).expect("sized"));
    }
    Ok(RoutingTrace {
        channels,
        temperature,
        centers,
        probs,
        norms,
    })
}

struct RoutingRule {
    graph: Rc<CsrGraph>,
    trace: Rc<RoutingTrace>,
}

impl BackwardRule for RoutingRule {
    fn backward(&self, grad: &Matrix, _inputs: &[&Matrix], _output: &Matrix) -> Vec<Option<Matrix>> {
        let z = self.trace.centers[0].as_slice().expect("standard layout");
        let channels = self.trace.channels;
        let inv_tau = 1.0 / self.trace.temperature;
        let (n, width) = self.trace.centers[0].dim();
        let delta = width / channels;
        let g = &*self.graph;
        let mut gz = vec![0.0; n * width];
        let mut gc = grad.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
        let mut gs = vec![0.0; n * width];
        let mut gp = vec![0.0; channels];
        for t in (1..self.trace.centers.len()).rev() {
            let c = self.trace.centers[t].as_slice().expect("standard layout");
            let prev = self.trace.centers[t - 1].as_slice().expect("standard layout");
            let p = self.trace.probs[t - 1].as_slice().expect("standard layout");
            let norms = self.trace.norms[t - 1].as_slice().expect("standard layout");
            // through c = s / max(‖s‖, eps)
            for (i, ((gsb, gcb), cb)) in gs
                .chunks_exact_mut(delta)
                .zip(gc.chunks_exact(delta))
                .zip(c.chunks_exact(delta))
                .enumerate()
            {
                let r = norms[i];
                if r > NORMALIZE_EPS {
                    let proj = dot(cb, gcb);
                    for ((o, gv), cv) in gsb.iter_mut().zip(gcb).zip(cb) {
                        *o = (gv - cv * proj) / r;
                    }
                } else {
                    for (o, gv) in gsb.iter_mut().zip(gcb) {
                        *o = gv / NORMALIZE_EPS;
                    }
                }
            }
            // s_u = z_u + Σ_v p_{uv} z_v, p = softmax(⟨z_v, c^{t-1}_u⟩)
            for (a, b) in gz.iter_mut().zip(&gs) {
                *a += b;
            }
            let mut gc_prev = vec![0.0; n * width];
            let mut e = 0;
            for u in 0..n {
                let gsu = &gs[u * width..(u + 1) * width];
                let cu = &prev[u * width..(u + 1) * width];
                for &v in g.neighbors(u) {
                    let zv = &z[v * width..(v + 1) * width];
                    let pe = &p[e * channels..(e + 1) * channels];
                    let mut mean = 0.0;
                    for m in 0..channels {
                        let r = m * delta..(m + 1) * delta;
                        gp[m] = dot(&gsu[r], &zv[m * delta..(m + 1) * delta]);
                        mean += pe[m] * gp[m];
                    }
                    let gzv = &mut gz[v * width..(v + 1) * width];
                    for m in 0..channels {
                        let ga = pe[m] * (gp[m] - mean) * inv_tau;
                        let r = m * delta..(m + 1) * delta;
                        for ((o, gsv), cv) in gzv[r.clone()].iter_mut().zip(&gsu[r.clone()]).zip(&cu[r]) {
                            *o += pe[m] * gsv + ga * cv;
                        }
                    }
                    let gcu = &mut gc_prev[u * width..(u + 1) * width];
                    for m in 0..channels {
                        let ga = pe[m] * (gp[m] - mean) * inv_tau;
                        if ga == 0.0 {
                            continue;
                        }
                        let r = m * delta..(m + 1) * delta;
                        for (o, zk) in gcu[r.clone()].iter_mut().zip(&zv[r]) {
                            *o += ga * zk;
                        }
                    }
                    e += 1;
                }
            }
            gc = gc_prev;
        }
        // c^0 = z
        for (a, b) in gz.iter_mut().zip(&gc) {
            *a += b;
        }
        vec![Some(Array2::from_shape_vec((n, width), gz).expect("sized"))]
    }
}

/// Differentiable routing over concatenated channels (N×(M·Δ) in and out).
pub fn neighborhood_routing(
    tape: &mut Tape,
    z: Value,
    graph: &Rc<CsrGraph>,
    channels: usize,
    iterations: usize,
    temperature: f64,
) -> Result<(Value, Rc<RoutingTrace>)> {
    let trace = Rc::new(route_tempered(tape.data(z), graph, channels, iterations, temperature)?);
    let out = trace.output().clone();
    let rule = RoutingRule {
        graph: Rc::clone(graph),
        trace: Rc::clone(&trace),
    };
    Ok((tape.custom(&[z], out, rule), trace))
}
