//! Detection-side model with two views of every item.
//!
//! The semantic view feeds external embeddings through a two-layer adapter
//! plus a scaled linear residual. The collaborative view fuses the
//! PCA-reduced embeddings with learned ID embeddings under a content-dependent
//! sigmoid gate. Each view has its own recurrent encoder, and predicts the next
//! item against its own input table. Training combines both recommendation
//! losses with a symmetric cross-view InfoNCE term on final representations.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::GruCell;
use crate::numkit::{axpy, dot, log_sum_exp, norm, DenseMatrix, SeededRng};
use crate::optim::{train_loop, TrainConfig, TrainReport};
use crate::parallel::accumulate_ordered;
use crate::params::{read_checkpoint, write_checkpoint, Architecture, Layout, ParamVector};
use crate::semantics::{reduce, SemanticTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualViewConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub max_len: usize,
    /// Residual coefficient of the semantic path.
    pub lambda1: f64,
    /// Std of the initial weights. Small initial states leave the normalized
    /// contrastive gradient to dominate the recommendation terms.
    pub init_scale: f64,
}

impl Default for DualViewConfig {
    fn default() -> Self {
        DualViewConfig {
            vocab: 2,
            hidden: 32,
            max_len: 200,
            lambda1: 0.5,
            init_scale: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda2: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            lambda2: 0.1,
            temperature: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.lambda2 >= 0.0) || !(self.temperature > 0.0)
        {
            return Err(Error::invalid(
                "need alpha in [0,1], lambda2 >= 0, temperature > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Semantic,
    Collaborative,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    adapter1_w: usize,
    adapter1_b: usize,
    adapter2_w: usize,
    adapter2_b: usize,
    residual_w: usize,
    fusion_w: usize,
    fusion_b: usize,
    gate_w: usize,
    gate_b: usize,
    id_embeddings: usize,
}

#[derive(Debug, Clone)]
pub struct DualView {
    config: DualViewConfig,
    sem_dim: usize,
    layout: Arc<Layout>,
    e_s: Arc<DenseMatrix>,
    e_p: Arc<DenseMatrix>,
    off: Offsets,
    sem_cell: GruCell,
    col_cell: GruCell,
}

/// Per-item inputs of both views, plus the activations their backward pass needs.
#[derive(Debug, Clone)]
pub struct ItemTables {
    hidden: usize,
    semantic: Vec<f64>,
    collaborative: Vec<f64>,
    adapter_pre: Vec<f64>,
    adapter_act: Vec<f64>,
    gate: Vec<f64>,
    fused: Vec<f64>,
}

impl ItemTables {
    pub fn semantic_row(&self, item: u32) -> &[f64] {
        let d = self.hidden;
        &self.semantic[item as usize * d..(item as usize + 1) * d]
    }

    pub fn collaborative_row(&self, item: u32) -> &[f64] {
        let d = self.hidden;
        &self.collaborative[item as usize * d..(item as usize + 1) * d]
    }

    pub fn gate_row(&self, item: u32) -> &[f64] {
        let d = self.hidden;
        &self.gate[item as usize * d..(item as usize + 1) * d]
    }

    fn table(&self, view: View) -> &[f64] {
        match view {
            View::Semantic => &self.semantic,
            View::Collaborative => &self.collaborative,
        }
    }
}

/// Per-position outputs of one view: `R(k) = h_k` and the predictive
/// distribution for position `k` given the items before it (uniform at k = 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEncoding {
    pub hidden: usize,
    pub states: Vec<f64>,
    pub dists: Vec<Vec<f64>>,
}

impl ViewEncoding {
    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.hidden..(k + 1) * self.hidden]
    }
}

/// The three components of the joint objective on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub semantic_rec: f64,
    pub collaborative_rec: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `out = W x` for row-major `W` with `out.len()` rows.
fn matvec_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `dW += g x^T`.
fn outer_acc(g: &[f64], x: &[f64], dw: &mut [f64]) {
    let cols = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
        if *gi != 0.0 {
            axpy(*gi, x, row);
        }
    }
}

/// `out += W^T g`.
fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi != 0.0 {
            axpy(*gi, row, out);
        }
    }
}

/// Symmetric cross-view InfoNCE on L2-normalized final representations:
/// `-(1/2B) sum_i [log softmax_j(s(i,j)/tau)[i] + log softmax_j(s(j,i)/tau)[i]]`
/// with `s(i,j) = R_s(i) . R_c(j)`.
pub fn contrastive_loss(rs: &[Vec<f64>], rc: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(contrastive_with_grad(rs, rc, tau, false)?.0)
}

type ContrastiveGrad = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn contrastive_with_grad(
    rs: &[Vec<f64>],
    rc: &[Vec<f64>],
    tau: f64,
    want_grad: bool,
) -> Result<ContrastiveGrad> {
    let b = rs.len();
    if b == 0 || rc.len() != b {
        return Err(Error::invalid(
            "contrastive batch must be non-empty with one pair per sequence",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let normalize = |v: &Vec<f64>| -> Result<(Vec<f64>, f64)> {
        let n = norm(v);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateVector(
                "zero-norm sequence representation".into(),
            ));
        }
        Ok((v.iter().map(|x| x / n).collect(), n))
    };
    let ns: Vec<(Vec<f64>, f64)> = rs.iter().map(normalize).collect::<Result<_>>()?;
    let nc: Vec<(Vec<f64>, f64)> = rc.iter().map(normalize).collect::<Result<_>>()?;
    let s: Vec<Vec<f64>> = ns
        .iter()
        .map(|(a, _)| nc.iter().map(|(c, _)| dot(a, c) / tau).collect())
        .collect();
    let row_lse: Vec<f64> = s.iter().map(|r| log_sum_exp(r)).collect();
    let col_lse: Vec<f64> = (0..b)
        .map(|j| log_sum_exp(&(0..b).map(|i| s[i][j]).collect::<Vec<_>>()))
        .collect();
    let mut loss = 0.0;
    for i in 0..b {
        loss -= (s[i][i] - row_lse[i]) + (s[i][i] - col_lse[i]);
    }
    loss /= 2.0 * b as f64;
    if !want_grad {
        return Ok((loss, Vec::new(), Vec::new()));
    }
    let d = rs[0].len();
    let inv = 1.0 / (2.0 * b as f64 * tau);
    let mut dhat_s = vec![vec![0.0; d]; b];
    let mut dhat_c = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let mut g = (s[i][j] - row_lse[i]).exp() + (s[i][j] - col_lse[j]).exp();
            if i == j {
                g -= 2.0;
            }
            g *= inv;
            axpy(g, &nc[j].0, &mut dhat_s[i]);
            axpy(g, &ns[i].0, &mut dhat_c[j]);
        }
    }
    let back = |dhat: Vec<Vec<f64>>, n: &[(Vec<f64>, f64)]| -> Vec<Vec<f64>> {
        dhat.into_iter()
            .zip(n)
            .map(|(mut g, (u, len))| {
                let p = dot(u, &g);
                axpy(-p, u, &mut g);
                g.iter_mut().for_each(|x| *x /= len);
                g
            })
            .collect()
    };
    Ok((loss, back(dhat_s, &ns), back(dhat_c, &nc)))
}

impl DualView {
    /// Builds the model around a semantic table; `E_p` is its PCA reduction to
    /// the hidden width.
    pub fn new(config: DualViewConfig, semantics: &SemanticTable) -> Result<Self> {
        if config.vocab < 2 || config.hidden < 2 {
            return Err(Error::invalid(
                "dual-view model needs vocab >= 2 and hidden >= 2",
            ));
        }
        if semantics.items() != config.vocab {
            return Err(Error::invalid(format!(
                "semantic table has {} rows for a vocabulary of {}",
                semantics.items(),
                config.vocab
            )));
        }
        let e_p = reduce(semantics, config.hidden)?;
        Self::with_inputs(config, semantics.embeddings().clone(), e_p)
    }

    /// Builds the model from explicit `E_s` (`V x d`) and `E_p` (`V x hidden`).
    pub fn with_inputs(config: DualViewConfig, e_s: DenseMatrix, e_p: DenseMatrix) -> Result<Self> {
        let (v, d) = (config.vocab, config.hidden);
        if e_s.rows() != v || e_p.rows() != v || e_p.cols() != d {
            return Err(Error::invalid(
                "semantic inputs do not match the model dimensions",
            ));
        }
        let ds = e_s.cols();
        let mut l = Layout::new();
        let off = Offsets {
            adapter1_w: l.push("semantic.adapter1_w", d, ds),
            adapter1_b: l.push("semantic.adapter1_b", 1, d),
            adapter2_w: l.push("semantic.adapter2_w", d, d),
            adapter2_b: l.push("semantic.adapter2_b", 1, d),
            residual_w: l.push("semantic.residual_w", d, ds),
            fusion_w: l.push("collaborative.fusion_w", d, d),
            fusion_b: l.push("collaborative.fusion_b", 1, d),
            gate_w: l.push("collaborative.gate_w", d, 2 * d),
            gate_b: l.push("collaborative.gate_b", 1, d),
            id_embeddings: l.push("collaborative.id_embeddings", v, d),
        };
        let sem_cell = GruCell::register(&mut l, "semantic.encoder", d, d);
        let col_cell = GruCell::register(&mut l, "collaborative.encoder", d, d);
        Ok(DualView {
            config,
            sem_dim: ds,
            layout: Arc::new(l),
            e_s: Arc::new(e_s),
            e_p: Arc::new(e_p),
            off,
            sem_cell,
            col_cell,
        })
    }

    pub fn config(&self) -> &DualViewConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::zeros(Arc::clone(&self.layout))
    }

    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        let mut p = self.zero_params();
        p.randomize(self.config.init_scale, rng);
        p
    }

    fn cell(&self, view: View) -> &GruCell {
        match view {
            View::Semantic => &self.sem_cell,
            View::Collaborative => &self.col_cell,
        }
    }

    fn check_seq(&self, seq: &[u32]) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::invalid(format!(
                "sequence longer than {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = seq.iter().find(|&&i| i as usize >= self.config.vocab) {
            return Err(Error::invalid(format!("item {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Semantic input `Adapter(E_s[i]) + lambda1 * w1 E_s[i]` and collaborative
    /// input `G_i * (w2 E_p[i] + b1) + (1 - G_i) * E_i[i]` for every item.
    pub fn item_inputs(&self, params: &ParamVector) -> Result<ItemTables> {
        if params.len() != self.layout.len() {
            return Err(Error::invalid("parameter vector does not match this model"));
        }
        Ok(self.tables(params.as_slice()))
    }

    fn tables(&self, p: &[f64]) -> ItemTables {
        let (v, d, ds) = (self.config.vocab, self.config.hidden, self.sem_dim);
        let o = &self.off;
        let a1w = &p[o.adapter1_w..o.adapter1_w + d * ds];
        let a1b = &p[o.adapter1_b..o.adapter1_b + d];
        let a2w = &p[o.adapter2_w..o.adapter2_w + d * d];
        let a2b = &p[o.adapter2_b..o.adapter2_b + d];
        let rw = &p[o.residual_w..o.residual_w + d * ds];
        let fw = &p[o.fusion_w..o.fusion_w + d * d];
        let fb = &p[o.fusion_b..o.fusion_b + d];
        let gw = &p[o.gate_w..o.gate_w + 2 * d * d];
        let gb = &p[o.gate_b..o.gate_b + d];
        let ids = &p[o.id_embeddings..o.id_embeddings + v * d];
        let mut t = ItemTables {
            hidden: d,
            semantic: vec![0.0; v * d],
            collaborative: vec![0.0; v * d],
            adapter_pre: vec![0.0; v * d],
            adapter_act: vec![0.0; v * d],
            gate: vec![0.0; v * d],
            fused: vec![0.0; v * d],
        };
        let mut tmp = vec![0.0; d];
        let mut cat = vec![0.0; 2 * d];
        for i in 0..v {
            let r = i * d..(i + 1) * d;
            let es = self.e_s.row(i);
            let pre = &mut t.adapter_pre[r.clone()];
            matvec_into(a1w, es, pre);
            axpy(1.0, a1b, pre);
            let act = &mut t.adapter_act[r.clone()];
            for (a, &x) in act.iter_mut().zip(pre.iter()) {
                *a = silu(x);
            }
            let sem = &mut t.semantic[r.clone()];
            matvec_into(a2w, act, sem);
            axpy(1.0, a2b, sem);
            matvec_into(rw, es, &mut tmp);
            axpy(self.config.lambda1, &tmp, sem);

            let ep = self.e_p.row(i);
            let id = &ids[r.clone()];
            let fused = &mut t.fused[r.clone()];
            matvec_into(fw, ep, fused);
            axpy(1.0, fb, fused);
            cat[..d].copy_from_slice(ep);
            cat[d..].copy_from_slice(id);
            let gate = &mut t.gate[r.clone()];
            matvec_into(gw, &cat, gate);
            for (g, &b) in gate.iter_mut().zip(gb) {
                *g = sigmoid(*g + b);
            }
            let col = &mut t.collaborative[r];
            for k in 0..d {
                col[k] = gate[k] * fused[k] + (1.0 - gate[k]) * id[k];
            }
        }
        t
    }

    /// Pulls table gradients (`V x hidden` per view) back into the item-path
    /// parameters.
    fn tables_backward(
        &self,
        p: &[f64],
        t: &ItemTables,
        d_sem: &[f64],
        d_col: &[f64],
        grad: &mut [f64],
    ) {
        let (v, d, ds) = (self.config.vocab, self.config.hidden, self.sem_dim);
        let o = self.off;
        let a2w = &p[o.adapter2_w..o.adapter2_w + d * d];
        let gw = &p[o.gate_w..o.gate_w + 2 * d * d];
        let ids = &p[o.id_embeddings..o.id_embeddings + v * d];
        let mut dact = vec![0.0; d];
        let mut dpre = vec![0.0; d];
        let mut dgate = vec![0.0; d];
        let mut dfused = vec![0.0; d];
        let mut dres = vec![0.0; d];
        let mut cat = vec![0.0; 2 * d];
        let mut dcat = vec![0.0; 2 * d];
        for i in 0..v {
            let r = i * d..(i + 1) * d;
            let es = self.e_s.row(i);
            let gs = &d_sem[r.clone()];
            if gs.iter().any(|&g| g != 0.0) {
                outer_acc(
                    gs,
                    &t.adapter_act[r.clone()],
                    &mut grad[o.adapter2_w..o.adapter2_w + d * d],
                );
                axpy(1.0, gs, &mut grad[o.adapter2_b..o.adapter2_b + d]);
                dact.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(a2w, gs, &mut dact);
                for k in 0..d {
                    dpre[k] = dact[k] * silu_grad(t.adapter_pre[i * d + k]);
                }
                outer_acc(&dpre, es, &mut grad[o.adapter1_w..o.adapter1_w + d * ds]);
                axpy(1.0, &dpre, &mut grad[o.adapter1_b..o.adapter1_b + d]);
                for k in 0..d {
                    dres[k] = self.config.lambda1 * gs[k];
                }
                outer_acc(&dres, es, &mut grad[o.residual_w..o.residual_w + d * ds]);
            }

            let gc = &d_col[r.clone()];
            if gc.iter().any(|&g| g != 0.0) {
                let ep = self.e_p.row(i);
                let id = &ids[r.clone()];
                let gate = &t.gate[r.clone()];
                let fused = &t.fused[r.clone()];
                for k in 0..d {
                    dfused[k] = gc[k] * gate[k];
                    dgate[k] = gc[k] * (fused[k] - id[k]) * gate[k] * (1.0 - gate[k]);
                }
                outer_acc(&dfused, ep, &mut grad[o.fusion_w..o.fusion_w + d * d]);
                axpy(1.0, &dfused, &mut grad[o.fusion_b..o.fusion_b + d]);
                cat[..d].copy_from_slice(ep);
                cat[d..].copy_from_slice(id);
                outer_acc(&dgate, &cat, &mut grad[o.gate_w..o.gate_w + 2 * d * d]);
                axpy(1.0, &dgate, &mut grad[o.gate_b..o.gate_b + d]);
                dcat.iter_mut().for_each(|x| *x = 0.0);
                matvec_t_acc(gw, &dgate, &mut dcat);
                let gid = &mut grad[o.id_embeddings + i * d..o.id_embeddings + (i + 1) * d];
                for k in 0..d {
                    gid[k] += gc[k] * (1.0 - gate[k]) + dcat[d + k];
                }
            }
        }
    }

    /// Runs one view over `seq`.
    pub fn encode(
        &self,
        params: &ParamVector,
        tables: &ItemTables,
        view: View,
        seq: &[u32],
    ) -> Result<ViewEncoding> {
        self.check_seq(seq)?;
        let p = params.as_slice();
        let (d, v) = (self.config.hidden, self.config.vocab);
        let table = tables.table(view);
        let inputs = gather(table, d, seq);
        let tr = self.cell(view).forward(p, &inputs, seq.len());
        let mut dists = Vec::with_capacity(seq.len());
        if !seq.is_empty() {
            dists.push(vec![1.0 / v as f64; v]);
        }
        for k in 1..seq.len() {
            let mut logits = logits(table, tr.state(k - 1, d));
            let lse = log_sum_exp(&logits);
            logits.iter_mut().for_each(|x| *x = (*x - lse).exp());
            dists.push(logits);
        }
        Ok(ViewEncoding {
            hidden: d,
            states: tr.h,
            dists,
        })
    }

    /// `L_t = alpha L_r^s + (1 - alpha) L_r^c + lambda2 L_c` on a batch, with
    /// the recommendation losses averaged over every next-item term.
    pub fn joint_loss(
        &self,
        params: &ParamVector,
        batch: &[&[u32]],
        cfg: &LossConfig,
    ) -> Result<(LossParts, ParamVector)> {
        let (parts, g) = self.joint_loss_raw(params.as_slice(), batch, cfg)?;
        Ok((parts, ParamVector::from_vec(Arc::clone(&self.layout), g)?))
    }

    fn joint_loss_raw(
        &self,
        p: &[f64],
        batch: &[&[u32]],
        cfg: &LossConfig,
    ) -> Result<(LossParts, Vec<f64>)> {
        self.check_batch(p, batch, cfg)?;
        let (d, v) = (self.config.hidden, self.config.vocab);
        let tables = self.tables(p);
        let terms: usize = batch.iter().map(|s| s.len() - 1).sum();
        let w_rec = |view: View| {
            let a = match view {
                View::Semantic => cfg.alpha,
                View::Collaborative => 1.0 - cfg.alpha,
            };
            if terms == 0 {
                0.0
            } else {
                a / terms as f64
            }
        };

        let mut contrast = 0.0;
        let mut d_final: Vec<[Vec<f64>; 2]> = vec![[Vec::new(), Vec::new()]; batch.len()];
        if cfg.lambda2 != 0.0 {
            let (rs, rc) = (
                self.final_states(p, &tables, View::Semantic, batch),
                self.final_states(p, &tables, View::Collaborative, batch),
            );
            let (l, gs, gc) = contrastive_with_grad(&rs, &rc, cfg.temperature, true)?;
            contrast = l;
            for (slot, (mut a, mut b)) in d_final.iter_mut().zip(gs.into_iter().zip(gc)) {
                a.iter_mut().for_each(|x| *x *= cfg.lambda2);
                b.iter_mut().for_each(|x| *x *= cfg.lambda2);
                *slot = [a, b];
            }
        }

        // Buffer: parameter gradient, the two item-table gradients, then the
        // two views' summed cross-entropies.
        let np = self.layout.len();
        let dim = np + 2 * v * d + 2;
        let idx: Vec<usize> = (0..batch.len()).collect();
        let (_, mut buf) = accumulate_ordered(&idx, dim, |&b, g| {
            let seq = batch[b];
            let (gp, gt) = g.split_at_mut(np);
            let (gts, rest) = gt.split_at_mut(v * d);
            let (gtc, sums) = rest.split_at_mut(v * d);
            sums[0] += self.view_backward(
                p,
                &tables,
                View::Semantic,
                seq,
                w_rec(View::Semantic),
                &d_final[b][0],
                gp,
                gts,
            );
            sums[1] += self.view_backward(
                p,
                &tables,
                View::Collaborative,
                seq,
                w_rec(View::Collaborative),
                &d_final[b][1],
                gp,
                gtc,
            );
            Ok(0.0)
        })?;
        let sums = buf.split_off(np + 2 * v * d);
        let tabs = buf.split_off(np);
        let mut grad = buf;
        let (dts, dtc) = tabs.split_at(v * d);
        self.tables_backward(p, &tables, dts, dtc, &mut grad);

        let denom = terms.max(1) as f64;
        let (rec_s, rec_c) = (sums[0] / denom, sums[1] / denom);
        let total = cfg.alpha * rec_s + (1.0 - cfg.alpha) * rec_c + cfg.lambda2 * contrast;
        Ok((
            LossParts {
                semantic_rec: rec_s,
                collaborative_rec: rec_c,
                contrastive: contrast,
                total,
            },
            grad,
        ))
    }

    fn check_batch(&self, p: &[f64], batch: &[&[u32]], cfg: &LossConfig) -> Result<()> {
        cfg.validate()?;
        if p.len() != self.layout.len() {
            return Err(Error::invalid("parameter vector does not match this model"));
        }
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for s in batch {
            if s.is_empty() {
                return Err(Error::invalid("empty sequence in batch"));
            }
            self.check_seq(s)?;
        }
        Ok(())
    }

    fn final_states(
        &self,
        p: &[f64],
        tables: &ItemTables,
        view: View,
        batch: &[&[u32]],
    ) -> Vec<Vec<f64>> {
        let d = self.config.hidden;
        batch
            .iter()
            .map(|s| {
                let tr = self
                    .cell(view)
                    .forward(p, &gather(tables.table(view), d, s), s.len());
                tr.state(s.len() - 1, d).to_vec()
            })
            .collect()
    }

    /// [`DualView::joint_loss`] without the backward pass.
    pub fn joint_loss_value(
        &self,
        params: &ParamVector,
        batch: &[&[u32]],
        cfg: &LossConfig,
    ) -> Result<LossParts> {
        let p = params.as_slice();
        self.check_batch(p, batch, cfg)?;
        let tables = self.tables(p);
        let (rec_s, rec_c) = self.rec_losses(p, &tables, batch)?;
        let contrast = if cfg.lambda2 != 0.0 {
            let rs = self.final_states(p, &tables, View::Semantic, batch);
            let rc = self.final_states(p, &tables, View::Collaborative, batch);
            contrastive_loss(&rs, &rc, cfg.temperature)?
        } else {
            0.0
        };
        Ok(LossParts {
            semantic_rec: rec_s,
            collaborative_rec: rec_c,
            contrastive: contrast,
            total: cfg.alpha * rec_s + (1.0 - cfg.alpha) * rec_c + cfg.lambda2 * contrast,
        })
    }

    /// Mean next-item cross-entropy of each view over the batch.
    fn rec_losses(&self, p: &[f64], tables: &ItemTables, batch: &[&[u32]]) -> Result<(f64, f64)> {
        let d = self.config.hidden;
        let terms: usize = batch.iter().map(|s| s.len() - 1).sum();
        if terms == 0 {
            return Ok((0.0, 0.0));
        }
        let mut out = [0.0; 2];
        for (vi, view) in [View::Semantic, View::Collaborative]
            .into_iter()
            .enumerate()
        {
            let table = tables.table(view);
            let (sum, _) = accumulate_ordered(batch, 0, |s, _| {
                let tr = self.cell(view).forward(p, &gather(table, d, s), s.len());
                Ok((1..s.len())
                    .map(|k| {
                        let l = logits(table, tr.state(k - 1, d));
                        log_sum_exp(&l) - l[s[k] as usize]
                    })
                    .sum())
            })?;
            out[vi] = sum / terms as f64;
        }
        Ok((out[0], out[1]))
    }

    /// Backpropagates `w * sum_k CE_k` plus a final-state gradient through one
    /// view's encoder into `grad` and the view's table gradient `dtable`.
    /// Returns the unweighted `sum_k CE_k`.
    #[allow(clippy::too_many_arguments)]
    fn view_backward(
        &self,
        p: &[f64],
        tables: &ItemTables,
        view: View,
        seq: &[u32],
        w: f64,
        d_final: &[f64],
        grad: &mut [f64],
        dtable: &mut [f64],
    ) -> f64 {
        let d = self.config.hidden;
        let table = tables.table(view);
        let cell = self.cell(view);
        let inputs = gather(table, d, seq);
        let tr = cell.forward(p, &inputs, seq.len());
        let mut dh = vec![0.0; seq.len() * d];
        let mut loss = 0.0;
        for k in 1..seq.len() {
            let h = tr.state(k - 1, d);
            let mut probs = logits(table, h);
            let lse = log_sum_exp(&probs);
            loss += lse - probs[seq[k] as usize];
            if w != 0.0 {
                probs.iter_mut().for_each(|x| *x = (*x - lse).exp());
                probs[seq[k] as usize] -= 1.0;
                let dhk = &mut dh[(k - 1) * d..k * d];
                for (j, (row, grow)) in table
                    .chunks_exact(d)
                    .zip(dtable.chunks_exact_mut(d))
                    .enumerate()
                {
                    let g = w * probs[j];
                    axpy(g, row, dhk);
                    axpy(g, h, grow);
                }
            }
        }
        if !d_final.is_empty() {
            axpy(1.0, d_final, &mut dh[(seq.len() - 1) * d..]);
        }
        let mut dx = vec![0.0; inputs.len()];
        cell.backward(p, &inputs, &tr, &mut dh, grad, Some(&mut dx));
        for (t, &item) in seq.iter().enumerate() {
            let o = item as usize * d;
            axpy(1.0, &dx[t * d..(t + 1) * d], &mut dtable[o..o + d]);
        }
        loss
    }

    /// Minibatch training of the joint objective on `sequences`.
    pub fn train(
        &self,
        params: &mut ParamVector,
        sequences: &[Vec<u32>],
        train_cfg: &TrainConfig,
        loss_cfg: &LossConfig,
        rng: &mut SeededRng,
    ) -> Result<TrainReport> {
        loss_cfg.validate()?;
        let usable: Vec<&[u32]> = sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(Vec::as_slice)
            .collect();
        if usable.is_empty() {
            return Err(Error::invalid("no training sequence has two or more items"));
        }
        train_loop(params, usable.len(), train_cfg, rng, |p, batch| {
            let seqs: Vec<&[u32]> = batch.iter().map(|&i| usable[i]).collect();
            let (parts, g) = self.joint_loss_raw(p, &seqs, loss_cfg)?;
            Ok((parts.total, g))
        })
    }

    /// Evaluates the joint-loss components on `sequences` in batches of
    /// `batch_size`, averaged over batches.
    pub fn evaluate(
        &self,
        params: &ParamVector,
        sequences: &[Vec<u32>],
        batch_size: usize,
        cfg: &LossConfig,
    ) -> Result<LossParts> {
        let usable: Vec<&[u32]> = sequences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(Vec::as_slice)
            .collect();
        let tables = self.tables(params.as_slice());
        let mut acc = LossParts::default();
        let chunks: Vec<&[&[u32]]> = usable.chunks(batch_size.max(1)).collect();
        for c in &chunks {
            let (rs, rc) = self.rec_losses(params.as_slice(), &tables, c)?;
            acc.semantic_rec += rs;
            acc.collaborative_rec += rc;
        }
        let n = chunks.len().max(1) as f64;
        acc.semantic_rec /= n;
        acc.collaborative_rec /= n;
        acc.total = cfg.alpha * acc.semantic_rec + (1.0 - cfg.alpha) * acc.collaborative_rec;
        Ok(acc)
    }

    pub fn save(&self, params: &ParamVector, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            semantic_dim: self.sem_dim,
        };
        write_checkpoint(path, Architecture::DualView, &header, params)
    }

    /// Loads a checkpoint; the semantic table must be the one it was trained with.
    pub fn load(path: &Path, semantics: &SemanticTable) -> Result<(DualView, ParamVector)> {
        let raw = read_checkpoint(path)?;
        if raw.arch != Architecture::DualView {
            return Err(Error::Format(format!(
                "{} is not a dual-view checkpoint",
                path.display()
            )));
        }
        let header: CheckpointHeader = serde_json::from_value(raw.header)?;
        if header.semantic_dim != semantics.dim() {
            return Err(Error::Format(
                "semantic table dimension differs from the checkpoint".into(),
            ));
        }
        let model = DualView::new(header.config, semantics)?;
        let params = ParamVector::from_vec(Arc::clone(&model.layout), raw.params)?;
        Ok((model, params))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: DualViewConfig,
    semantic_dim: usize,
}

fn gather(table: &[f64], d: usize, seq: &[u32]) -> Vec<f64> {
    let mut x = Vec::with_capacity(seq.len() * d);
    for &i in seq {
        x.extend_from_slice(&table[i as usize * d..(i as usize + 1) * d]);
    }
    x
}

fn logits(table: &[f64], h: &[f64]) -> Vec<f64> {
    table.chunks_exact(h.len()).map(|row| dot(row, h)).collect()
}
