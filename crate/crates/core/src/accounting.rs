//! Exact per-layer parameter and FLOP accounting.
//!
//! Parameter rows are computed from layer geometry (closed formulas), one
//! row per registered tensor; the registry enumeration is the independent
//! oracle. FLOP rows are computed by walking the topology with the same
//! shape propagation the forward pass performs; the runtime meter inside
//! the kernels is the independent oracle there. Conventions are shared
//! with [`crate::meter`] and printed in every report header.
//!
//! FLOP totals are per sample (batch 1), forward pass only.

use crate::blocks::{Brm, Classifier, Conv2dLayer, ConvBnRelu, Head, SeBlock, PSP_SCALES};
use crate::error::{Error, Result};
use crate::meter::{FLOPS_BATCH_NORM, FLOPS_BILINEAR, FLOPS_RELU, FLOPS_TRANSCENDENTAL};
use crate::network::{BrmBlock, Model};
use crate::ops::conv::conv2d_flops;
use crate::ops::pool::adaptive_avg_pool_flops;
use crate::params::ParamId;
use crate::sgcn::SgcnPropagator;

/// One accounting row. `params` is exact and input-independent; `flops`
/// holds the forward cost at the accounted input size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer_name: String,
    pub params: u64,
    pub flops: u64,
}

/// Rows plus their totals.
#[derive(Debug, Clone)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    pub param_total: u64,
    pub flop_total: u64,
}

impl CostTable {
    fn from_rows(rows: Vec<CostRow>) -> CostTable {
        let param_total = rows.iter().map(|r| r.params).sum();
        let flop_total = rows.iter().map(|r| r.flops).sum();
        CostTable {
            rows,
            param_total,
            flop_total,
        }
    }
}

/// Trainable scalars of a batch-norm layer (gamma + beta).
pub fn batch_norm_params(channels: usize) -> u64 {
    2 * channels as u64
}

fn conv_param_rows(out: &mut Vec<(ParamId, u64)>, conv: &Conv2dLayer) {
    let spec = conv.spec();
    let weight = (spec.out_channels * spec.in_channels * spec.kernel.0 * spec.kernel.1) as u64;
    out.push((conv.weight_id(), weight));
    if let Some(b) = conv.bias_id() {
        out.push((b, spec.out_channels as u64));
    }
}

fn cbr_param_rows(out: &mut Vec<(ParamId, u64)>, unit: &ConvBnRelu) {
    conv_param_rows(out, &unit.conv);
    out.push((unit.bn.gamma, unit.bn.channels as u64));
    out.push((unit.bn.beta, unit.bn.channels as u64));
}

fn se_param_rows(out: &mut Vec<(ParamId, u64)>, se: &SeBlock) {
    conv_param_rows(out, &se.fc1);
    conv_param_rows(out, &se.fc2);
}

fn brm_param_rows(out: &mut Vec<(ParamId, u64)>, brm: &Brm) {
    cbr_param_rows(out, &brm.bottleneck);
    for u in &brm.fact_a {
        cbr_param_rows(out, u);
    }
    se_param_rows(out, &brm.se);
    for u in &brm.fact_b {
        cbr_param_rows(out, u);
    }
    cbr_param_rows(out, &brm.recover);
}

fn sgcn_param_rows(out: &mut Vec<(ParamId, u64)>, sg: &SgcnPropagator) {
    conv_param_rows(out, &sg.proj);
    let d2 = (sg.dim * sg.dim) as u64;
    out.push((sg.delta_w, d2));
    out.push((sg.psi_w, d2));
    for t in &sg.theta {
        out.push((*t, d2));
    }
    out.push((sg.q, d2));
    conv_param_rows(out, &sg.reproj);
}

/// Per-tensor parameter counts in registry order, computed from layer
/// geometry. The registry enumeration ([`crate::params::ParamStore::total_scalars`])
/// is the oracle this must match exactly.
pub fn count_params(model: &Model) -> CostTable {
    let mut by_id: Vec<(ParamId, u64)> = Vec::new();
    let topo = &model.topo;
    for unit in &topo.initial.convs {
        cbr_param_rows(&mut by_id, unit);
    }
    for (down, block) in topo.downs.iter().zip(&topo.enc_blocks) {
        cbr_param_rows(&mut by_id, &down.unit);
        for brm in &block.brms {
            brm_param_rows(&mut by_id, brm);
        }
    }
    if let Some(sgcn) = &topo.sgcn {
        for sg in sgcn {
            sgcn_param_rows(&mut by_id, sg);
        }
    }
    for block in &topo.dec_blocks {
        for brm in &block.brms {
            brm_param_rows(&mut by_id, brm);
        }
    }
    for up in &topo.ups {
        cbr_param_rows(&mut by_id, &up.conv);
    }
    match &topo.head {
        Head::None => {}
        Head::Se(se) => se_param_rows(&mut by_id, se),
        Head::Psp(psp) => cbr_param_rows(&mut by_id, &psp.fuse),
        Head::Aspp(aspp) => {
            cbr_param_rows(&mut by_id, &aspp.entry);
            for b in &aspp.rate_branches {
                cbr_param_rows(&mut by_id, b);
            }
            cbr_param_rows(&mut by_id, &aspp.pool_branch);
            cbr_param_rows(&mut by_id, &aspp.fuse);
        }
    }
    conv_param_rows(&mut by_id, &topo.classifier.conv);

    by_id.sort_by_key(|(id, _)| id.index());
    let rows = by_id
        .into_iter()
        .map(|(id, count)| CostRow {
            layer_name: model.params().get(id).name.clone(),
            params: count,
            flops: 0,
        })
        .collect();
    CostTable::from_rows(rows)
}

struct FlopWalk {
    rows: Vec<CostRow>,
}

impl FlopWalk {
    fn push(&mut self, name: String, flops: u64) {
        self.rows.push(CostRow {
            layer_name: name,
            params: 0,
            flops,
        });
    }

    /// conv + norm + optional relu at batch 1; returns the output (c, h, w).
    fn cbr(&mut self, name: String, unit: &ConvBnRelu, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let spec = unit.conv.spec();
        let (oh, ow) = spec.output_hw(h, w)?;
        let out_elems = (spec.out_channels * oh * ow) as u64;
        let mut flops = conv2d_flops(spec, 1, oh, ow) + FLOPS_BATCH_NORM * out_elems;
        if unit.relu {
            flops += FLOPS_RELU * out_elems;
        }
        self.push(name, flops);
        Ok((spec.out_channels, oh, ow))
    }

    /// gap → fc1 → relu → fc2 → sigmoid → channel-wise multiply.
    fn se(&mut self, name: String, se: &SeBlock, c: usize, h: usize, w: usize) -> u64 {
        let mid = se.fc1.spec().out_channels;
        let mut flops = adaptive_avg_pool_flops(1, c, h, w, 1, 1);
        flops += conv2d_flops(se.fc1.spec(), 1, 1, 1);
        flops += FLOPS_RELU * mid as u64;
        flops += conv2d_flops(se.fc2.spec(), 1, 1, 1);
        flops += FLOPS_TRANSCENDENTAL * c as u64;
        flops += (c * h * w) as u64;
        self.push(name, flops);
        flops
    }

    fn brm(&mut self, name: &str, brm: &Brm, c: usize, h: usize, w: usize) -> Result<()> {
        // the factorized units are shape-preserving, so dims track the
        // bottleneck output throughout
        let (mc, mh, mw) = self.cbr(format!("{name}.bottleneck"), &brm.bottleneck, h, w)?;
        self.cbr(format!("{name}.fact_a1"), &brm.fact_a[0], mh, mw)?;
        self.cbr(format!("{name}.fact_a2"), &brm.fact_a[1], mh, mw)?;
        self.se(format!("{name}.se"), &brm.se, mc, mh, mw);
        self.cbr(format!("{name}.fact_b1"), &brm.fact_b[0], mh, mw)?;
        self.cbr(format!("{name}.fact_b2"), &brm.fact_b[1], mh, mw)?;
        self.cbr(format!("{name}.recover"), &brm.recover, mh, mw)?;
        // residual add back to (c, h, w)
        self.push(format!("{name}.skip"), (c * h * w) as u64);
        Ok(())
    }

    fn brm_block(&mut self, name: &str, block: &BrmBlock, c: usize, h: usize, w: usize) -> Result<()> {
        for (k, brm) in block.brms.iter().enumerate() {
            self.brm(&format!("{name}.brm{k}"), brm, c, h, w)?;
        }
        // block-level residual wrap
        self.push(format!("{name}.residual"), (c * h * w) as u64);
        Ok(())
    }

    /// Mirrors SgcnPropagator::forward at batch 1.
    fn sgcn(&mut self, name: &str, sg: &SgcnPropagator, c: usize, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(sg.pool_factor) || !w.is_multiple_of(sg.pool_factor) {
            return Err(Error::InvalidGeometry {
                context: "count_flops",
                message: format!("sgcn scale {h}x{w} not divisible by pool factor"),
            });
        }
        let gh = h / sg.pool_factor;
        let gw = w / sg.pool_factor;
        let n = gh * gw;
        let d = sg.dim;
        let (n64, d64) = (n as u64, d as u64);
        let mut flops = adaptive_avg_pool_flops(1, c, h, w, gh, gw);
        flops += conv2d_flops(sg.proj.spec(), 1, gh, gw);
        // adjacency: delta/psi transforms, scaled scores, softmax, symmetrize
        flops += 2 * d64 * d64 * n64; // delta_w · X
        flops += 2 * d64 * d64 * n64; // psi_w · X
        flops += 2 * n64 * d64 * n64; // (δX)ᵀ(ψX)
        flops += n64 * n64; // scale by 1/sqrt(d)
        flops += FLOPS_TRANSCENDENTAL * n64 * n64; // row softmax
        flops += n64 * n64; // A + Aᵀ
        flops += n64 * n64; // × 0.5
        // normalization: self loops, degrees, rsqrt, two diagonal scalings
        flops += n64; // A + I
        flops += n64 * n64; // row sums
        flops += FLOPS_TRANSCENDENTAL * n64; // rsqrt
        flops += 2 * n64 * n64; // D^(-1/2) (A+I) D^(-1/2)
        // graph-convolution layers
        for _ in &sg.theta {
            flops += 2 * d64 * d64 * n64; // Θᵀ H
            flops += 2 * d64 * n64 * n64; // · Âᵀ
            flops += FLOPS_RELU * d64 * n64;
        }
        // output aggregation: Qᵀ H Âᵀ
        flops += 2 * d64 * d64 * n64;
        flops += 2 * d64 * n64 * n64;
        // upsample and re-projection
        flops += FLOPS_BILINEAR * d64 * (h * w) as u64;
        flops += conv2d_flops(sg.reproj.spec(), 1, h, w);
        self.push(name.to_string(), flops);
        Ok(())
    }

    fn head(&mut self, head: &Head, c: usize, h: usize, w: usize) -> Result<()> {
        match head {
            Head::None => self.push("head".to_string(), 0),
            Head::Se(se) => {
                self.se("head".to_string(), se, c, h, w);
            }
            Head::Psp(psp) => {
                for s in PSP_SCALES {
                    let flops = adaptive_avg_pool_flops(1, c, h, w, s, s)
                        + FLOPS_BILINEAR * (c * h * w) as u64;
                    self.push(format!("head.scale{s}"), flops);
                }
                self.cbr("head.fuse".to_string(), &psp.fuse, h, w)?;
            }
            Head::Aspp(aspp) => {
                self.cbr("head.entry".to_string(), &aspp.entry, h, w)?;
                for (r, branch) in aspp.rates.iter().zip(&aspp.rate_branches) {
                    self.cbr(format!("head.rate{r}"), branch, h, w)?;
                }
                let mid = aspp.pool_branch.conv.spec().out_channels;
                let mut pool_flops = adaptive_avg_pool_flops(1, c, h, w, 1, 1);
                pool_flops += conv2d_flops(aspp.pool_branch.conv.spec(), 1, 1, 1);
                pool_flops += FLOPS_BATCH_NORM * mid as u64;
                pool_flops += FLOPS_RELU * mid as u64;
                pool_flops += FLOPS_BILINEAR * (mid * h * w) as u64;
                self.push("head.pool".to_string(), pool_flops);
                self.cbr("head.fuse".to_string(), &aspp.fuse, h, w)?;
            }
        }
        Ok(())
    }

    fn classifier(&mut self, cls: &Classifier, h: usize, w: usize, out_hw: (usize, usize)) -> Result<()> {
        let spec = cls.conv.spec();
        let (oh, ow) = spec.output_hw(h, w)?;
        let flops = conv2d_flops(spec, 1, oh, ow)
            + FLOPS_BILINEAR * (spec.out_channels * out_hw.0 * out_hw.1) as u64;
        self.push("classifier".to_string(), flops);
        Ok(())
    }
}

/// Per-layer forward FLOPs (batch 1) at the given input size. Must mirror
/// the forward pass op for op; the runtime meter is the oracle.
pub fn count_flops(model: &Model, input_hw: (usize, usize)) -> Result<CostTable> {
    let (h, w) = input_hw;
    let div = model.config.spatial_divisor();
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::InvalidGeometry {
            context: "count_flops",
            message: format!("input {h}x{w} must be divisible by {div}"),
        });
    }
    let topo = &model.topo;
    let mut walk = FlopWalk { rows: Vec::new() };

    let (mut ch, mut cw) = (h, w);
    for (i, unit) in topo.initial.convs.iter().enumerate() {
        let (_, nh, nw) = walk.cbr(format!("initial.unit{}", i + 1), unit, ch, cw)?;
        ch = nh;
        cw = nw;
    }

    let mut scales = Vec::with_capacity(3);
    for (i, (down, block)) in topo.downs.iter().zip(&topo.enc_blocks).enumerate() {
        let (c, nh, nw) = walk.cbr(format!("down{}", i + 1), &down.unit, ch, cw)?;
        ch = nh;
        cw = nw;
        walk.brm_block(&format!("enc{}", i + 1), block, c, ch, cw)?;
        scales.push((c, ch, cw));
    }

    if let Some(sgcn) = &topo.sgcn {
        for (i, sg) in sgcn.iter().enumerate() {
            let (sc, sh, sw) = scales[i];
            walk.sgcn(&format!("sgcn{}", i + 1), sg, sc, sh, sw)?;
            // fusion add into the decoder path
            walk.push(format!("sgcn{}.fuse", i + 1), (sc * sh * sw) as u64);
        }
    }

    // decoder: block4 at scale 3, block5 at scale 2, block6 at scale 1
    let (c3, h3, w3) = scales[2];
    walk.brm_block("dec4", &topo.dec_blocks[0], c3, h3, w3)?;
    let up1 = walk.up("up1", &topo.ups[0], c3, h3, w3)?;
    let (c2, h2, w2) = up1;
    walk.brm_block("dec5", &topo.dec_blocks[1], c2, h2, w2)?;
    let (c1, h1, w1) = walk.up("up2", &topo.ups[1], c2, h2, w2)?;
    walk.brm_block("dec6", &topo.dec_blocks[2], c1, h1, w1)?;
    let (c0, h0, w0) = walk.up("up3", &topo.ups[2], c1, h1, w1)?;

    walk.head(&topo.head, c0, h0, w0)?;
    walk.classifier(&topo.classifier, h0, w0, (h, w))?;

    Ok(CostTable::from_rows(walk.rows))
}

impl FlopWalk {
    /// Bilinear 2x upsample then 1x1 conv + norm + relu.
    fn up(
        &mut self,
        name: &str,
        up: &crate::blocks::UpsampleUnit,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<(usize, usize, usize)> {
        let (uh, uw) = (h * 2, w * 2);
        let resize = FLOPS_BILINEAR * (c * uh * uw) as u64;
        let spec = up.conv.conv.spec();
        let out_elems = (spec.out_channels * uh * uw) as u64;
        let mut flops = resize + conv2d_flops(spec, 1, uh, uw) + FLOPS_BATCH_NORM * out_elems;
        if up.conv.relu {
            flops += FLOPS_RELU * out_elems;
        }
        self.push(name.to_string(), flops);
        Ok((spec.out_channels, uh, uw))
    }
}

/// Report output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Render the merged accounting table: one row per forward unit, with that
/// unit's parameters, FLOPs, and share of total FLOPs. Parameter tensors
/// are matched to units by their dot-separated name prefix.
pub fn report(model: &Model, input_hw: (usize, usize), format: ReportFormat) -> Result<String> {
    let params = count_params(model);
    let flops = count_flops(model, input_hw)?;
    let merged: Vec<CostRow> = flops
        .rows
        .iter()
        .map(|frow| {
            let prefix = format!("{}.", frow.layer_name);
            let p: u64 = params
                .rows
                .iter()
                .filter(|prow| prow.layer_name.starts_with(&prefix))
                .map(|prow| prow.params)
                .sum();
            CostRow {
                layer_name: frow.layer_name.clone(),
                params: p,
                flops: frow.flops,
            }
        })
        .collect();
    let flop_total = flops.flop_total.max(1);

    let mut out = String::new();
    match format {
        ReportFormat::Text => {
            out.push_str(&format!(
                "# forward cost at {}x{} (batch 1); 1 MAC = 2 FLOPs; sigmoid/softmax/exp/rsqrt = 4 FLOPs/elt; norm = 2, relu/add = 1, bilinear = 8 per output elt\n",
                input_hw.0, input_hw.1
            ));
            out.push_str(&format!(
                "{:<28} {:>12} {:>16} {:>8}\n",
                "layer", "params", "flops", "pct"
            ));
            for row in &merged {
                out.push_str(&format!(
                    "{:<28} {:>12} {:>16} {:>7.2}%\n",
                    row.layer_name,
                    row.params,
                    row.flops,
                    100.0 * row.flops as f64 / flop_total as f64
                ));
            }
            out.push_str(&format!(
                "{:<28} {:>12} {:>16} {:>7.2}%\n",
                "total",
                params.param_total,
                flops.flop_total,
                100.0
            ));
        }
        ReportFormat::Csv => {
            out.push_str("layer,params,flops,pct\n");
            for row in &merged {
                out.push_str(&format!(
                    "{},{},{},{:.4}\n",
                    csv_field(&row.layer_name),
                    row.params,
                    row.flops,
                    100.0 * row.flops as f64 / flop_total as f64
                ));
            }
            out.push_str(&format!(
                "total,{},{},100.0000\n",
                params.param_total, flops.flop_total
            ));
        }
    }
    Ok(out)
}

/// RFC-4180-style quoting: quote fields containing commas, quotes or
/// newlines, doubling embedded quotes.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::tensor::ConvSpec;
    
    #[test]
    fn pointwise_conv_param_formula() {
        // 1x1 conv, 3 -> 4 channels with bias
        assert_eq!(ConvSpec::pointwise(3, 4).param_count(), 16);
    }

    #[test]
    fn conv_plus_norm_param_formula() {
        // 3x3 conv 32 -> 32 with bias plus norm
        let conv = ConvSpec::same(3, 32, 32).param_count();
        assert_eq!(conv + batch_norm_params(32), 9312);
    }

    #[test]
    fn pointwise_conv_flop_formula() {
        // 1x1 conv 8 -> 8 on a 4x4 map, no bias: 2*1*1*8*8*16
        let spec = ConvSpec::pointwise(8, 8).without_bias();
        assert_eq!(conv2d_flops(&spec, 1, 4, 4), 2048);
    }

    #[test]
    fn conv_flops_scale_with_area() {
        let spec = ConvSpec::same(3, 8, 16);
        assert_eq!(conv2d_flops(&spec, 1, 32, 32) * 4, conv2d_flops(&spec, 1, 64, 64));
    }

    #[test]
    fn params_match_registry_enumeration() {
        for cfg in [
            ModelConfig::tiny(),
            ModelConfig::desk(),
            ModelConfig::default_config(),
        ] {
            let model = Model::build(&cfg).unwrap();
            let table = count_params(&model);
            assert_eq!(
                table.param_total,
                model.params().total_scalars(),
                "config {:?}",
                cfg.stage_channels
            );
            assert_eq!(table.rows.len(), model.params().len());
            for (row, (_, p)) in table.rows.iter().zip(model.params().iter()) {
                assert_eq!(row.layer_name, p.name);
                assert_eq!(row.params, p.value.len() as u64, "tensor {}", p.name);
            }
        }
    }

    #[test]
    fn flops_match_runtime_meter_exactly() {
        let cfg = ModelConfig::tiny();
        let model = Model::build(&cfg).unwrap();
        let table = count_flops(&model, (32, 32)).unwrap();
        let mut rng = crate::rng::Rng::new(1);
        let x = crate::tensor::Tensor::random([1, 3, 32, 32], 0.0, 1.0, &mut rng);
        crate::meter::start();
        model.forward_eval(&x).unwrap();
        let measured = crate::meter::stop();
        assert_eq!(table.flop_total, measured);
    }

    #[test]
    fn flops_reject_indivisible_input() {
        let model = Model::build(&ModelConfig::tiny()).unwrap();
        assert!(count_flops(&model, (40, 64)).is_err());
    }

    #[test]
    fn sgcn_cost_delta_equals_sgcn_rows() {
        let cfg_on = ModelConfig::tiny();
        let mut cfg_off = cfg_on.clone();
        cfg_off.sgcn_enabled = false;
        let on = Model::build(&cfg_on).unwrap();
        let off = Model::build(&cfg_off).unwrap();

        let p_on = count_params(&on);
        let p_off = count_params(&off);
        let sgcn_params: u64 = p_on
            .rows
            .iter()
            .filter(|r| r.layer_name.starts_with("sgcn"))
            .map(|r| r.params)
            .sum();
        assert_eq!(p_on.param_total - p_off.param_total, sgcn_params);

        let f_on = count_flops(&on, (32, 32)).unwrap();
        let f_off = count_flops(&off, (32, 32)).unwrap();
        let sgcn_flops: u64 = f_on
            .rows
            .iter()
            .filter(|r| r.layer_name.starts_with("sgcn"))
            .map(|r| r.flops)
            .sum();
        assert_eq!(f_on.flop_total - f_off.flop_total, sgcn_flops);
    }

    #[test]
    fn aspp_param_delta_matches_accounting() {
        // the aspp head adds exactly the parameter delta versus head none
        let mut with = ModelConfig::tiny();
        with.head = crate::blocks::HeadKind::default_aspp();
        let mut without = with.clone();
        without.head = crate::blocks::HeadKind::None;
        let m_with = Model::build(&with).unwrap();
        let m_without = Model::build(&without).unwrap();
        let head_params: u64 = count_params(&m_with)
            .rows
            .iter()
            .filter(|r| r.layer_name.starts_with("head"))
            .map(|r| r.params)
            .sum();
        assert!(head_params > 0);
        assert_eq!(
            count_params(&m_with).param_total - count_params(&m_without).param_total,
            head_params
        );
        assert_eq!(
            m_with.params().total_scalars() - m_without.params().total_scalars(),
            head_params
        );
    }

    #[test]
    fn report_percentages_sum_to_100() {
        let model = Model::build(&ModelConfig::tiny()).unwrap();
        let text = report(&model, (32, 32), ReportFormat::Text).unwrap();
        let mut sum = 0.0;
        for line in text.lines().skip(2) {
            if line.starts_with("total") {
                continue;
            }
            let pct: f64 = line
                .split_whitespace()
                .last()
                .unwrap()
                .trim_end_matches('%')
                .parse()
                .unwrap();
            sum += pct;
        }
        assert!((sum - 100.0).abs() < 0.1, "sum {sum}");
    }

    #[test]
    fn csv_report_parses_back_to_same_totals() {
        let model = Model::build(&ModelConfig::tiny()).unwrap();
        let csv = report(&model, (32, 32), ReportFormat::Csv).unwrap();
        let params = count_params(&model);
        let flops = count_flops(&model, (32, 32)).unwrap();
        let mut param_sum = 0u64;
        let mut flop_sum = 0u64;
        let mut total_line = None;
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields[0] == "total" {
                total_line = Some((fields[1].parse::<u64>().unwrap(), fields[2].parse::<u64>().unwrap()));
                continue;
            }
            param_sum += fields[1].parse::<u64>().unwrap();
            flop_sum += fields[2].parse::<u64>().unwrap();
        }
        let (total_params, total_flops) = total_line.unwrap();
        assert_eq!(flop_sum, flops.flop_total);
        assert_eq!(total_flops, flops.flop_total);
        assert_eq!(total_params, params.param_total);
        // merged rows cover every parameter exactly once
        assert_eq!(param_sum, params.param_total);
    }

    #[test]
    fn csv_quoting_escapes_specials() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("a\"b"), "\"a\"\"b\"");
    }

    #[test]
    fn single_row_table_renders() {
        let table = CostTable::from_rows(vec![CostRow {
            layer_name: "classifier".into(),
            params: 16,
            flops: 2048,
        }]);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.param_total, 16);
        assert_eq!(table.flop_total, 2048);
    }
}
