//! The assembled MFPNet model: configuration, build, forward, and weight
//! checkpoints.
//!
//! Topology: initial block (1/2) → three [downsample → BRM block] encoder
//! stages (1/4, 1/8, 1/16) → three SGCN propagators off the encoder outputs
//! → mirrored decoder BRM blocks with the propagated features added in →
//! three upsample units → segmentation head → classifier resized to the
//! input resolution. Each encoder/decoder block wraps its BRM chain in one
//! residual connection.

use crate::blocks::{
    Brm, Classifier, DownsampleUnit, Head, HeadKind, InitialBlock, UpsampleUnit,
};
use crate::error::{Error, Result};
use crate::params::{Forward, Mode, NetBuilder, ParamStore, StateStore};
use crate::sgcn::{SgcnPropagator, SGCN_NUM_LAYERS, SGCN_POOL_FACTOR};
use crate::tape::NodeId;
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

/// Magic header of the weight checkpoint format.
pub const WEIGHTS_MAGIC: &[u8; 4] = b"MFPW";
/// Version of the weight checkpoint format.
pub const WEIGHTS_VERSION: u32 = 1;

/// Full architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Initial Block output channels (also the head/classifier width).
    pub c0: usize,
    /// Encoder stage channels (C1, C2, C3); the decoder mirrors them.
    pub stage_channels: (usize, usize, usize),
    /// BRMs per block, encoder 1..3 then decoder 4..6 (mirror-constrained).
    pub brm_counts: [usize; 6],
    /// Per-block dilation schedules; list length equals the BRM count.
    pub dilations: [Vec<usize>; 6],
    pub sgcn_enabled: bool,
    /// Graph-space dims (d1, d2, d3).
    pub sgcn_dims: (usize, usize, usize),
    pub head: HeadKind,
    /// Nominal input resolution (used by defaults and FLOP accounting).
    pub input_hw: (usize, usize),
}

impl ModelConfig {
    /// The full-size configuration. Stage channels are chosen so the total
    /// parameter count lands near 1.0 M as measured by the accounting
    /// module; dilation schedules follow the deepest ablation row.
    pub fn default_config() -> ModelConfig {
        ModelConfig {
            num_classes: 19,
            c0: 16,
            stage_channels: (32, 64, 112),
            brm_counts: [3; 6],
            dilations: [
                vec![2, 2, 2],
                vec![4, 8, 16],
                vec![4, 8, 16],
                vec![4, 8, 16],
                vec![4, 8, 16],
                vec![2, 2, 2],
            ],
            sgcn_enabled: true,
            sgcn_dims: (16, 32, 56),
            head: HeadKind::default_aspp(),
            input_hw: (64, 64),
        }
    }

    /// Smallest valid configuration; used by gradient-check suites.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            c0: 8,
            stage_channels: (8, 16, 16),
            brm_counts: [1; 6],
            dilations: [
                vec![2],
                vec![2],
                vec![2],
                vec![2],
                vec![2],
                vec![2],
            ],
            sgcn_enabled: true,
            sgcn_dims: (4, 8, 8),
            head: HeadKind::default_aspp(),
            input_hw: (32, 32),
        }
    }

    /// Desk-scale training configuration.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            c0: 16,
            stage_channels: (16, 32, 64),
            brm_counts: [2; 6],
            dilations: [
                vec![2, 2],
                vec![4, 8],
                vec![4, 8],
                vec![4, 8],
                vec![4, 8],
                vec![2, 2],
            ],
            sgcn_enabled: true,
            sgcn_dims: (8, 16, 32),
            head: HeadKind::default_aspp(),
            input_hw: (64, 64),
        }
    }

    /// Spatial divisor the input must satisfy: 16 for the scale ladder,
    /// times the SGCN pool factor when propagators are enabled.
    pub fn spatial_divisor(&self) -> usize {
        if self.sgcn_enabled {
            16 * SGCN_POOL_FACTOR
        } else {
            16
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field_err = |field: &str, message: String| {
            Err(Error::InvalidConfig {
                field: field.into(),
                message,
            })
        };
        if self.num_classes == 0 {
            return field_err("num_classes", "must be >= 1".into());
        }
        if self.c0 < 2 {
            return field_err("c0", "must be >= 2".into());
        }
        let (c1, c2, c3) = self.stage_channels;
        for (name, c) in [("C1", c1), ("C2", c2), ("C3", c3)] {
            // BRM shrinks by 2 and its SE attention by another 4
            if c < 8 {
                return field_err(
                    "stage_channels",
                    format!("{name}={c} too small: BRM internals need >= 8"),
                );
            }
        }
        if self.brm_counts[0] != self.brm_counts[5]
            || self.brm_counts[1] != self.brm_counts[4]
            || self.brm_counts[2] != self.brm_counts[3]
        {
            return field_err(
                "brm_counts",
                format!("mirror symmetry L1=L6, L2=L5, L3=L4 violated: {:?}", self.brm_counts),
            );
        }
        for (i, (count, dils)) in self.brm_counts.iter().zip(&self.dilations).enumerate() {
            if *count == 0 {
                return field_err("brm_counts", format!("block {} has zero BRMs", i + 1));
            }
            if dils.len() != *count {
                return field_err(
                    "dilations",
                    format!(
                        "block {} has {} rates for {} BRMs",
                        i + 1,
                        dils.len(),
                        count
                    ),
                );
            }
            if dils.contains(&0) {
                return field_err("dilations", format!("block {} has a zero rate", i + 1));
            }
        }
        if self.sgcn_enabled {
            let (d1, d2, d3) = self.sgcn_dims;
            if d1 == 0 || d2 == 0 || d3 == 0 {
                return field_err("sgcn_dims", format!("must be >= 1, got {:?}", self.sgcn_dims));
            }
        }
        if let HeadKind::Aspp { rates, reduction } = &self.head {
            if rates.is_empty() {
                return field_err("head", "aspp needs at least one rate".into());
            }
            if *reduction == 0 || self.c0 / *reduction == 0 {
                return field_err(
                    "head",
                    format!("aspp reduction {reduction} too large for c0 ={}", self.c0),
                );
            }
        }
        let div = self.spatial_divisor();
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return field_err(
                "input_hw",
                format!("({h}, {w}) must be positive and divisible by {div}"),
            );
        }
        Ok(())
    }
}

/// A BRM block: the chain of BRMs wrapped in one residual connection.
#[derive(Debug, Clone)]
pub(crate) struct BrmBlock {
    pub(crate) brms: Vec<Brm>,
}

impl BrmBlock {
    fn new(b: &mut NetBuilder, name: &str, channels: usize, dilations: &[usize]) -> Result<Self> {
        let brms = dilations
            .iter()
            .enumerate()
            .map(|(i, r)| Brm::new(b, &format!("{name}.brm{i}"), channels, *r))
            .collect::<Result<Vec<_>>>()?;
        Ok(BrmBlock { brms })
    }

    fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let mut y = x;
        for brm in &self.brms {
            y = brm.forward(f, y)?;
        }
        f.tape.add(x, y)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Topology {
    pub(crate) initial: InitialBlock,
    pub(crate) downs: [DownsampleUnit; 3],
    pub(crate) enc_blocks: [BrmBlock; 3],
    pub(crate) sgcn: Option<[SgcnPropagator; 3]>,
    pub(crate) dec_blocks: [BrmBlock; 3],
    pub(crate) ups: [UpsampleUnit; 3],
    pub(crate) head: Head,
    pub(crate) classifier: Classifier,
}

/// A built model: parameter registry, batch-norm state, fixed topology.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) states: StateStore,
    pub(crate) topo: Topology,
}

/// One tape-recorded training forward pass, ready for backprop.
pub struct TrainStep<'m> {
    fwd: Forward<'m>,
    logits: NodeId,
    param_shapes: Vec<crate::tensor::Shape>,
}

impl<'m> TrainStep<'m> {
    pub fn logits(&self) -> &Tensor {
        self.fwd.tape.value(self.logits)
    }


    /// Backpropagate from the logits and return gradients in registry
    /// order (zero tensors for parameters the pass did not touch).
    pub fn backward(self, logits_grad: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads = self.fwd.tape.backward(self.logits, logits_grad.clone())?;
        let mut out: Vec<Tensor> = self.param_shapes.iter().map(|s| Tensor::zeros(*s)).collect();
        for (pid, node) in self.fwd.touched_params() {
            if let Some(g) = grads.take(node) {
                out[pid.index()] = g;
            }
        }
        Ok(out)
    }
}

impl Model {
    /// Build with the default weight seed.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        Model::build_with_seed(config, 0)
    }

    pub fn build_with_seed(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = NetBuilder::new(seed);
        let (c1, c2, c3) = config.stage_channels;
        let initial = InitialBlock::new(&mut b, "initial", config.c0);
        let downs = [
            DownsampleUnit::new(&mut b, "down1", config.c0, c1),
            DownsampleUnit::new(&mut b, "down2", c1, c2),
            DownsampleUnit::new(&mut b, "down3", c2, c3),
        ];
        let enc_blocks = [
            BrmBlock::new(&mut b, "enc1", c1, &config.dilations[0])?,
            BrmBlock::new(&mut b, "enc2", c2, &config.dilations[1])?,
            BrmBlock::new(&mut b, "enc3", c3, &config.dilations[2])?,
        ];
        let sgcn = if config.sgcn_enabled {
            let (d1, d2, d3) = config.sgcn_dims;
            Some([
                SgcnPropagator::new(&mut b, "sgcn1", c1, d1, SGCN_NUM_LAYERS, SGCN_POOL_FACTOR)?,
                SgcnPropagator::new(&mut b, "sgcn2", c2, d2, SGCN_NUM_LAYERS, SGCN_POOL_FACTOR)?,
                SgcnPropagator::new(&mut b, "sgcn3", c3, d3, SGCN_NUM_LAYERS, SGCN_POOL_FACTOR)?,
            ])
        } else {
            None
        };
        let dec_blocks = [
            BrmBlock::new(&mut b, "dec4", c3, &config.dilations[3])?,
            BrmBlock::new(&mut b, "dec5", c2, &config.dilations[4])?,
            BrmBlock::new(&mut b, "dec6", c1, &config.dilations[5])?,
        ];
        let ups = [
            UpsampleUnit::new(&mut b, "up1", c3, c2),
            UpsampleUnit::new(&mut b, "up2", c2, c1),
            UpsampleUnit::new(&mut b, "up3", c1, config.c0),
        ];
        let head = Head::new(&mut b, "head", config.c0, &config.head)?;
        let classifier = Classifier::new(&mut b, "classifier", config.c0, config.num_classes);
        Ok(Model {
            config: config.clone(),
            params: b.params,
            states: b.states,
            topo: Topology {
                initial,
                downs,
                enc_blocks,
                sgcn,
                dec_blocks,
                ups,
                head,
                classifier,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn states(&self) -> &StateStore {
        &self.states
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let [_, c, h, w] = image.shape();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                context: "forward",
                dimension: "input channels",
                expected: 3,
                found: c,
            });
        }
        let div = self.config.spatial_divisor();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::InvalidGeometry {
                context: "forward",
                message: format!("input {h}x{w} must be divisible by {div}"),
            });
        }
        Ok(())
    }

    fn forward_on(topo: &Topology, f: &mut Forward, image: NodeId) -> Result<NodeId> {
        let [_, _, h, w] = f.tape.value(image).shape();
        let x0 = topo.initial.forward(f, image)?;
        f.check_finite(x0, "initial")?;

        let mut encoded = Vec::with_capacity(3);
        let mut x = x0;
        for (i, (down, block)) in topo.downs.iter().zip(&topo.enc_blocks).enumerate() {
            x = down.forward(f, x)?;
            x = block.forward(f, x)?;
            f.check_finite(x, &format!("enc{}", i + 1))?;
            encoded.push(x);
        }

        let propagated: Option<Vec<NodeId>> = match &topo.sgcn {
            Some(sgcn) => {
                let mut ms = Vec::with_capacity(3);
                for (i, (prop, e)) in sgcn.iter().zip(&encoded).enumerate() {
                    let m = prop.forward(f, *e)?;
                    f.check_finite(m, &format!("sgcn{}", i + 1))?;
                    ms.push(m);
                }
                Some(ms)
            }
            None => None,
        };
        let fuse = |f: &mut Forward, x: NodeId, scale: usize| -> Result<NodeId> {
            match &propagated {
                Some(ms) => f.tape.add(x, ms[scale]),
                None => Ok(x),
            }
        };

        // decoder mirrors the encoder: block4 at 1/16, block5 at 1/8, block6 at 1/4
        let mut y = fuse(f, encoded[2], 2)?;
        y = topo.dec_blocks[0].forward(f, y)?;
        f.check_finite(y, "dec4")?;
        y = topo.ups[0].forward(f, y)?;
        y = fuse(f, y, 1)?;
        y = topo.dec_blocks[1].forward(f, y)?;
        f.check_finite(y, "dec5")?;
        y = topo.ups[1].forward(f, y)?;
        y = fuse(f, y, 0)?;
        y = topo.dec_blocks[2].forward(f, y)?;
        f.check_finite(y, "dec6")?;
        y = topo.ups[2].forward(f, y)?;
        f.check_finite(y, "up3")?;

        y = topo.head.forward(f, y)?;
        f.check_finite(y, "head")?;
        let logits = topo.classifier.forward(f, y, (h, w))?;
        f.check_finite(logits, "classifier")?;
        Ok(logits)
    }

    /// Eval-mode forward; immutable and safe to call concurrently.
    pub fn forward_eval(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image)?;
        let mut f = Forward::eval(&self.params, &self.states);
        let x = f.tape.leaf(image.clone(), false);
        let logits = Model::forward_on(&self.topo, &mut f, x)?;
        Ok(f.tape.value(logits).clone())
    }

    /// Training-mode forward; updates batch-norm running statistics and
    /// returns the recorded step for backprop.
    pub fn forward_train(&mut self, image: &Tensor) -> Result<TrainStep<'_>> {
        self.check_input(image)?;
        let param_shapes: Vec<crate::tensor::Shape> =
            self.params.iter().map(|(_, p)| p.value.shape()).collect();
        let mut f = Forward::train(&self.params, &mut self.states, true);
        let x = f.tape.leaf(image.clone(), false);
        let logits = Model::forward_on(&self.topo, &mut f, x)?;
        Ok(TrainStep {
            fwd: f,
            logits,
            param_shapes,
        })
    }

    /// Mode-dispatched forward returning the logits value.
    pub fn forward(&mut self, image: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward_eval(image),
            Mode::Train => {
                let step = self.forward_train(image)?;
                Ok(step.logits().clone())
            }
        }
    }

    /// Whole-model finite-difference gradient check over a coordinate
    /// sample of every parameter plus the input. Runs in training mode, so
    /// the input batch must satisfy every batch-norm site (batch >= 2 with
    /// an ASPP head).
    pub fn gradient_check(
        &mut self,
        input: &Tensor,
        cfg: &crate::gradcheck::GradCheckConfig,
    ) -> Result<f64> {
        self.check_input(input)?;
        let topo = self.topo.clone();
        crate::gradcheck::check_param_graph(
            &mut self.params,
            &mut self.states,
            |f, x| Model::forward_on(&topo, f, x),
            input,
            cfg,
        )
    }

    /// Analytic per-stage shape trace (channels, height, width) for an
    /// input of the given size.
    pub fn shape_trace(&self, hw: (usize, usize)) -> Vec<(String, [usize; 3])> {
        let (c1, c2, c3) = self.config.stage_channels;
        let (h, w) = hw;
        let mut out = vec![
            ("input".to_string(), [3, h, w]),
            ("initial".to_string(), [self.config.c0, h / 2, w / 2]),
        ];
        let stages = [(c1, 4), (c2, 8), (c3, 16)];
        for (i, (c, s)) in stages.iter().enumerate() {
            out.push((format!("enc{}", i + 1), [*c, h / s, w / s]));
        }
        out.push(("dec4".to_string(), [c3, h / 16, w / 16]));
        out.push(("dec5".to_string(), [c2, h / 8, w / 8]));
        out.push(("dec6".to_string(), [c1, h / 4, w / 4]));
        out.push(("head".to_string(), [self.config.c0, h / 2, w / 2]));
        out.push((
            "classifier".to_string(),
            [self.config.num_classes, h, w],
        ));
        out
    }

    /// Checkpoint entries: every parameter in registry order, then every
    /// batch-norm running statistic.
    fn checkpoint_entries(&self) -> Vec<(String, Vec<u64>, Vec<f64>)> {
        let mut entries = Vec::new();
        for (_, p) in self.params.iter() {
            let dims: Vec<u64> = p.value.shape().iter().map(|d| *d as u64).collect();
            entries.push((p.name.clone(), dims, p.value.data().to_vec()));
        }
        for st in self.states.iter() {
            entries.push((
                format!("{}.running_mean", st.name),
                vec![st.running_mean.len() as u64],
                st.running_mean.clone(),
            ));
            entries.push((
                format!("{}.running_var", st.name),
                vec![st.running_var.len() as u64],
                st.running_var.clone(),
            ));
        }
        entries
    }

    /// Write the checkpoint: magic, version, entry count, per-entry name,
    /// rank, dims and payload, then a CRC32 of all preceding bytes.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let entries = self.checkpoint_entries();
        buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, dims, data) in &entries {
            let name_bytes = name.as_bytes();
            buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            buf.extend_from_slice(name_bytes);
            buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf.extend_from_slice(&crc32(&buf).to_le_bytes());
        let mut file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Build a model for `config` and fill it from a checkpoint. The file
    /// must contain exactly the expected entries with matching shapes and
    /// pass CRC verification; no partial model is returned otherwise.
    pub fn load_weights(config: &ModelConfig, path: &Path) -> Result<Model> {
        let origin = path.display().to_string();
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(origin.clone(), e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)
            .map_err(|e| Error::io(origin.clone(), e))?;
        if buf.len() < 4 + 4 + 8 + 4 {
            return Err(Error::format(&origin, "file truncated"));
        }
        let (body, crc_bytes) = buf.split_at(buf.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32(body);
        if stored_crc != computed {
            return Err(Error::format(
                &origin,
                format!("checksum mismatch: stored {stored_crc:#010x}, computed {computed:#010x}"),
            ));
        }

        let mut cursor = body;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::format(&origin, "file truncated"));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(4)? != WEIGHTS_MAGIC {
            return Err(Error::format(&origin, "bad magic, expected MFPW"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::WeightMismatch {
                expected: format!("version {WEIGHTS_VERSION}"),
                found: format!("version {version}"),
            });
        }
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;

        let mut model = Model::build(config)?;
        let expected = model.checkpoint_entries();
        if count != expected.len() {
            return Err(Error::WeightMismatch {
                expected: format!("{} entries", expected.len()),
                found: format!("{count} entries"),
            });
        }
        for (name, dims, _) in &expected {
            let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let found_name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| Error::format(&origin, "entry name is not UTF-8"))?;
            if &found_name != name {
                return Err(Error::WeightMismatch {
                    expected: format!("entry `{name}`"),
                    found: format!("entry `{found_name}`"),
                });
            }
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            if rank != dims.len() {
                return Err(Error::WeightMismatch {
                    expected: format!("`{name}` rank {}", dims.len()),
                    found: format!("rank {rank}"),
                });
            }
            let mut found_dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                found_dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()));
            }
            if &found_dims != dims {
                return Err(Error::WeightMismatch {
                    expected: format!("`{name}` dims {dims:?}"),
                    found: format!("dims {found_dims:?}"),
                });
            }
            let len: usize = dims.iter().product::<u64>() as usize;
            let payload = take(len * 8)?;
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.write_entry(name, values)?;
        }
        if !cursor.is_empty() {
            return Err(Error::format(&origin, "trailing bytes after last entry"));
        }
        Ok(model)
    }

    fn write_entry(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if let Some(id) = self.params.find(name) {
            let t = self.params.value_mut(id);
            t.data_mut().copy_from_slice(&values);
            return Ok(());
        }
        for st in self.states.iter_mut() {
            if name == format!("{}.running_mean", st.name) {
                st.running_mean.copy_from_slice(&values);
                return Ok(());
            }
            if name == format!("{}.running_var", st.name) {
                st.running_var.copy_from_slice(&values);
                return Ok(());
            }
        }
        Err(Error::WeightMismatch {
            expected: "a registered parameter or state".into(),
            found: format!("entry `{name}`"),
        })
    }
}

/// CRC-32 (IEEE 802.3, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for b in bytes {
        crc ^= *b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xedb8_8320 & mask);
        }
    }
    !crc
}
