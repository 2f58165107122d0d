//! Noisy top-k sparse mixture of experts.
//!
//! A gate scores every token against `N` experts, keeps the `k` largest
//! logits (ties go to the lower expert index), softmaxes the survivors and
//! sends the token only to the kept experts. During training the logits get
//! `ε·softplus(x·W_noise)` added, with `ε` standard normal per entry.

use std::collections::BTreeSet;
use std::fmt;

use fxmm_tensor::{Scalar, Tensor, Var};

use crate::block::Ffn;
use crate::params::{glorot, Forward, ParamId, Params, RouteMode};
use crate::seed::Rng;
use crate::{Error, Result};

/// A projection or sub-network that can be replaced by experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Site {
    Ffn,
    U,
    Q,
    K,
    V,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Ffn, Site::U, Site::Q, Site::K, Site::V];

    pub fn tag(self) -> &'static str {
        match self {
            Site::Ffn => "ffn",
            Site::U => "u",
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown MoE placement tag `{s}`")))
    }
}

/// Set of sites carrying experts. Empty means a fully dense block.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Placement(BTreeSet<Site>);

impl Placement {
    pub fn dense() -> Self {
        Self(BTreeSet::new())
    }

    /// FFN and the gating projection `U`.
    pub fn standard() -> Self {
        [Site::Ffn, Site::U].into_iter().collect()
    }

    /// Comma-separated tags; `none` or an empty string is the dense block.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::dense());
        }
        s.split(',')
            .map(|t| Site::parse(t.trim()))
            .collect::<Result<BTreeSet<_>>>()
            .map(Self)
    }

    pub fn contains(&self, site: Site) -> bool {
        self.0.contains(&site)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.0.iter().copied()
    }

    pub fn with(mut self, site: Site) -> Self {
        self.0.insert(site);
        self
    }
}

impl FromIterator<Site> for Placement {
    fn from_iter<I: IntoIterator<Item = Site>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let tags: Vec<_> = self.0.iter().map(|s| s.tag()).collect();
        f.write_str(&tags.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeConfig {
    pub experts: usize,
    pub top_k: usize,
    pub placement: Placement,
    pub noise: bool,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            top_k: 2,
            placement: Placement::standard(),
            noise: true,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::config("MoE needs at least one expert"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::config(format!(
                "top_k={} must be in 1..={}",
                self.top_k, self.experts
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries, larger values first, lower index on ties.
pub fn top_k_indices<T: Scalar>(v: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(Error::config(format!("top_k={k} must be in 1..={}", v.len())));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps the lower index first among equal values
    order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    Ok(order)
}

/// Keeps the top `k` entries and writes `-inf` elsewhere.
pub fn keep_top_k<T: Scalar>(v: &[T], k: usize) -> Result<Vec<T>> {
    let keep = top_k_indices(v, k)?;
    let mut out = vec![T::neg_infinity(); v.len()];
    for i in keep {
        out[i] = v[i];
    }
    Ok(out)
}

/// Routing outcome for a block of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub experts: usize,
    /// `[tokens × experts]`, zero outside the selection.
    pub weights: Vec<f64>,
    /// Selected experts per token, ascending.
    pub selected: Vec<Vec<usize>>,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn token_weights(&self, t: usize) -> &[f64] {
        &self.weights[t * self.experts..(t + 1) * self.experts]
    }

    /// Tokens routed to each expert.
    pub fn counts(&self) -> Vec<u64> {
        let mut c = vec![0; self.experts];
        for sel in &self.selected {
            for &e in sel {
                c[e] += 1;
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct Gate {
    w_g: ParamId,
    w_noise: ParamId,
    experts: usize,
    top_k: usize,
    noise: bool,
}

impl Gate {
    pub fn build<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        width: usize,
        cfg: &MoeConfig,
        rng: &mut Rng,
    ) -> Self {
        let w_g = params.add(format!("{prefix}.gate.w_g"), glorot(rng, width, cfg.experts));
        let w_noise = params.add(
            format!("{prefix}.gate.w_noise"),
            Tensor::zeros(vec![width, cfg.experts]),
        );
        Self {
            w_g,
            w_noise,
            experts: cfg.experts,
            top_k: cfg.top_k,
            noise: cfg.noise,
        }
    }

    pub fn w_g(&self) -> ParamId {
        self.w_g
    }

    pub fn w_noise(&self) -> ParamId {
        self.w_noise
    }

    /// Gate weights `[tokens × N]` on the tape plus the routing decision.
    pub fn route<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<(Var, GateDecision)> {
        let tokens = fwd.tape.shape(x)[0];
        let w_g = fwd.p(self.w_g);
        let mut logits = fwd.tape.matmul(x, w_g)?;
        if self.noise && fwd.route == RouteMode::Train {
            let eps = fwd.normal_draws(tokens * self.experts).ok_or_else(|| {
                Error::config("training-mode routing with noise needs a random stream")
            })?;
            let w_noise = fwd.p(self.w_noise);
            let raw = fwd.tape.matmul(x, w_noise)?;
            let scale = fwd.tape.softplus(raw);
            let eps = fwd
                .tape
                .constant(Tensor::new(vec![tokens, self.experts], eps)?);
            let noise = fwd.tape.mul(eps, scale)?;
            logits = fwd.tape.add(logits, noise)?;
        }

        let h = fwd.tape.data(logits);
        let mut keep = vec![false; h.len()];
        let mut selected = Vec::with_capacity(tokens);
        for t in 0..tokens {
            let row = &h[t * self.experts..(t + 1) * self.experts];
            let mut sel = top_k_indices(row, self.top_k)?;
            sel.sort_unstable();
            for &e in &sel {
                keep[t * self.experts + e] = true;
            }
            selected.push(sel);
        }
        let masked = fwd.tape.mask_neg_inf(logits, keep)?;
        let weights = fwd.tape.softmax(masked, 1)?;
        let decision = GateDecision {
            experts: self.experts,
            weights: fwd.tape.data(weights).iter().map(|v| v.as_f64()).collect(),
            selected,
        };
        Ok((weights, decision))
    }

    /// Routing decision for plain token rows `[tokens × width]`.
    pub fn decide<T: Scalar>(
        &self,
        params: &Params<T>,
        x: &Tensor<T>,
        route: RouteMode,
        noise: Option<Rng>,
    ) -> Result<GateDecision> {
        let mut fwd = Forward::new(params, fxmm_tensor::Mode::Inference, route, noise);
        let xv = fwd.tape.constant(x.clone());
        Ok(self.route(&mut fwd, xv)?.1)
    }
}

#[derive(Debug, Clone)]
pub enum Expert {
    Linear(ParamId),
    Ffn(Ffn),
}

impl Expert {
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Expert::Linear(w) => {
                let w = fwd.p(*w);
                Ok(fwd.tape.matmul(x, w)?)
            }
            Expert::Ffn(ffn) => ffn.forward(fwd, x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Expert::Linear(w) => vec![*w],
            Expert::Ffn(f) => f.param_ids(),
        }
    }
}

/// Gate plus `N` experts with identical input and output shapes.
#[derive(Debug, Clone)]
pub struct MoeLayer {
    label: String,
    gate: Gate,
    experts: Vec<Expert>,
    output: usize,
}

impl MoeLayer {
    /// Experts are single `[input × output]` linear maps.
    pub fn linear<T: Scalar>(
        params: &mut Params<T>,
        label: &str,
        input: usize,
        output: usize,
        cfg: &MoeConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let gate = Gate::build(params, label, input, cfg, rng);
        let experts = (0..cfg.experts)
            .map(|i| {
                Expert::Linear(params.add(format!("{label}.expert{i}"), glorot(rng, input, output)))
            })
            .collect();
        Ok(Self {
            label: label.to_string(),
            gate,
            experts,
            output,
        })
    }

    /// Experts are full gated FFNs.
    pub fn ffn<T: Scalar>(
        params: &mut Params<T>,
        label: &str,
        width: usize,
        hidden: usize,
        cfg: &MoeConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let gate = Gate::build(params, label, width, cfg, rng);
        let experts = (0..cfg.experts)
            .map(|i| Expert::Ffn(Ffn::build(params, &format!("{label}.expert{i}"), width, hidden, rng)))
            .collect();
        Ok(Self {
            label: label.to_string(),
            gate,
            experts,
            output: width,
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn output_width(&self) -> usize {
        self.output
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_decision(fwd, x)?.0)
    }

    /// Routes only rows with `active[t]` set; inactive rows come out zero
    /// and draw no gate noise.
    pub fn forward_masked<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        x: Var,
        active: &[bool],
    ) -> Result<Var> {
        let tokens = fwd.tape.shape(x)[0];
        if active.len() != tokens {
            return Err(Error::config(format!(
                "{} activity flags for {tokens} tokens",
                active.len()
            )));
        }
        if active.iter().all(|&a| a) {
            return self.forward(fwd, x);
        }
        let rows: Vec<usize> = (0..tokens).filter(|&t| active[t]).collect();
        if rows.is_empty() {
            return Ok(fwd.tape.constant(Tensor::zeros(vec![tokens, self.output])));
        }
        let xa = fwd.tape.gather_rows(x, &rows)?;
        let ya = self.forward(fwd, xa)?;
        Ok(fwd.tape.scatter_add_rows(ya, &rows, tokens)?)
    }

    /// Sparse evaluation: each expert only sees the tokens routed to it.
    pub fn forward_with_decision<T: Scalar>(
        &self,
        fwd: &mut Forward<'_, T>,
        x: Var,
    ) -> Result<(Var, GateDecision)> {
        let tokens = fwd.tape.shape(x)[0];
        let n = self.experts.len();
        let (weights, decision) = self.gate.route(fwd, x)?;
        let flat = fwd.tape.reshape(weights, &[tokens * n, 1])?;

        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..tokens)
                .filter(|&t| decision.selected[t].contains(&e))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let xe = fwd.tape.gather_rows(x, &rows)?;
            let ye = expert.forward(fwd, xe)?;
            let slots: Vec<usize> = rows.iter().map(|&t| t * n + e).collect();
            let we = fwd.tape.gather_rows(flat, &slots)?;
            let ye = fwd.tape.scale_rows(ye, we)?;
            let back = fwd.tape.scatter_add_rows(ye, &rows, tokens)?;
            out = Some(match out {
                Some(acc) => fwd.tape.add(acc, back)?,
                None => back,
            });
        }
        fwd.record_usage(&self.label, &decision.counts());
        let out = out.ok_or_else(|| Error::config("MoE layer received zero tokens"))?;
        Ok((out, decision))
    }
}
