use indexmap::IndexMap;

use super::{backbone_layer_name, bias_name, weight_name, Aggregation, BackboneConfig, NetworkParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::maps::ProbabilityMap;
use crate::tensor::Tensor;

/// Subtracted from every input intensity before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct TapVars {
    pub conv3_1: Var,
    pub conv4_1: Var,
    pub conv5_1: Var,
    pub pool5: Var,
}

impl TapVars {
    /// Tap feeding side branch `index` (1-based).
    pub fn branch_tap(&self, index: usize) -> Result<Var> {
        match index {
            1 => Ok(self.conv3_1),
            2 => Ok(self.conv4_1),
            3 => Ok(self.conv5_1),
            _ => Err(index_error("branch", index)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTaps {
    pub conv3_1: Tensor,
    pub conv4_1: Tensor,
    pub conv5_1: Tensor,
    pub pool5: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub paths: [Var; 3],
    pub branches: [Var; 3],
    pub fused: [Var; 3],
    pub final_logits: Var,
    pub probability: Var,
}

/// Every intermediate map of one forward pass, all at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs {
    pub paths: [Tensor; 3],
    pub branches: [Tensor; 3],
    pub fused: [Tensor; 3],
    pub final_logits: Tensor,
    pub probability: Tensor,
}

fn index_error(what: &str, index: usize) -> Error {
    Error::invalid(format!("{what} index {index} out of range 1..=3"))
}

fn check_index(what: &str, index: usize) -> Result<()> {
    if (1..=3).contains(&index) {
        Ok(())
    } else {
        Err(index_error(what, index))
    }
}

/// The network's parameters registered on a tape, with one method per
/// structural piece.
pub struct Graph<'t> {
    tape: &'t mut Tape,
    config: BackboneConfig,
    layers: IndexMap<String, (Var, Var)>,
}

impl<'t> Graph<'t> {
    pub fn new(tape: &'t mut Tape, params: &NetworkParams, requires_grad: bool) -> Result<Self> {
        let mut layers = IndexMap::new();
        for name in params.layer_names() {
            let (w, b) = params.layer(&name)?;
            let wv = tape.leaf(w.clone(), requires_grad);
            let bv = tape.leaf(b.clone(), requires_grad);
            layers.insert(name, (wv, bv));
        }
        Ok(Self {
            tape,
            config: params.config().clone(),
            layers,
        })
    }

    pub fn tape(&mut self) -> &mut Tape {
        self.tape
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// (weight, bias) vars of a layer.
    pub fn layer(&self, name: &str) -> Result<(Var, Var)> {
        self.layers
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Parameter vars keyed like the [`ParamStore`](crate::ParamStore) entries.
    pub fn parameter_vars(&self) -> Vec<(String, Var)> {
        self.layers
            .iter()
            .flat_map(|(name, &(w, b))| [(weight_name(name), w), (bias_name(name), b)])
            .collect()
    }

    /// Same-size convolution (padding = dilation for 3x3, 0 for 1x1).
    fn conv(&mut self, layer: &str, x: Var, dilation: usize) -> Result<Var> {
        let (w, b) = self.layer(layer)?;
        let kernel = self.tape.shape(w);
        let padding = dilation * (kernel.height / 2);
        let spec = ConvSpec::new(kernel).padding(padding).dilation(dilation);
        self.tape.conv2d(x, w, b, spec)
    }

    fn conv_relu(&mut self, layer: &str, x: Var, dilation: usize) -> Result<Var> {
        let y = self.conv(layer, x, dilation)?;
        Ok(self.tape.relu(y))
    }

    /// Five conv stages, each closed by a 2x2/2 max-pool. Taps are the
    /// post-ReLU activations of conv3_1, conv4_1 and conv5_1.
    pub fn backbone(&mut self, image: Var) -> Result<TapVars> {
        let s = self.tape.shape(image);
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::invalid(format!("expected a (1, 3, h, w) image, got {s}")));
        }
        if s.height == 0 || s.width == 0 || s.height % 32 != 0 || s.width % 32 != 0 {
            return Err(Error::invalid(format!(
                "image size {}x{} is not a positive multiple of 32",
                s.height, s.width
            )));
        }
        let mut x = self.tape.shift(image, -INPUT_MEAN);
        let mut taps = [x; 3];
        for stage in 1..=5 {
            for k in 1..=self.config.convs_per_stage[stage - 1] {
                x = self.conv_relu(&backbone_layer_name(stage, k), x, 1)?;
                if k == 1 && stage >= 3 {
                    taps[stage - 3] = x;
                }
            }
            x = self.tape.max_pool2d(x)?;
        }
        Ok(TapVars {
            conv3_1: taps[0],
            conv4_1: taps[1],
            conv5_1: taps[2],
            pool5: x,
        })
    }

    /// 3x3 conv + ReLU, 3x3 conv + ReLU, 1x1 conv to one logit channel,
    /// bilinear upsample to `out_size`.
    pub fn side_branch(&mut self, tap: Var, index: usize, out_size: (usize, usize)) -> Result<Var> {
        check_index("branch", index)?;
        let x = self.conv_relu(&format!("branch{index}_conv1"), tap, 1)?;
        let x = self.conv_relu(&format!("branch{index}_conv2"), x, 1)?;
        let x = self.conv(&format!("branch{index}_score"), x, 1)?;
        self.tape.upsample_bilinear(x, out_size.0, out_size.1)
    }

    /// Coupled structure module: two parallel components, each a dilated
    /// 3x3 conv + ReLU followed by a 1x1 conv + ReLU, summed.
    pub fn csm(&mut self, x: Var, index: usize) -> Result<Var> {
        check_index("csm", index)?;
        let expected = self.config.pool5_channels();
        let got = self.tape.shape(x).channels;
        if got != expected {
            return Err(Error::ShapeMismatch {
                op: "csm",
                dimension: "input channels",
                expected,
                actual: got,
            });
        }
        let (rate_a, rate_b) = self.config.path_dilations[index - 1];
        let a = self.conv_relu(&format!("csm{index}_a_dilated"), x, rate_a)?;
        let a = self.conv_relu(&format!("csm{index}_a_proj"), a, 1)?;
        let b = self.conv_relu(&format!("csm{index}_b_dilated"), x, rate_b)?;
        let b = self.conv_relu(&format!("csm{index}_b_proj"), b, 1)?;
        self.tape.add(a, b)
    }

    /// CSM block, 1x1 conv to one logit channel, bilinear upsample.
    pub fn path(&mut self, pool5: Var, index: usize, out_size: (usize, usize)) -> Result<Var> {
        check_index("path", index)?;
        let x = self.csm(pool5, index)?;
        let x = self.conv(&format!("path{index}_score"), x, 1)?;
        self.tape.upsample_bilinear(x, out_size.0, out_size.1)
    }

    /// F_i = W_i * concat(P_i, B_i) with a 2->1 1x1 convolution; no nonlinearity.
    pub fn fuse(&mut self, path: Var, branch: Var, index: usize) -> Result<Var> {
        check_index("fuse", index)?;
        let (sp, sb) = (self.tape.shape(path), self.tape.shape(branch));
        if sp.channels != 1 || sb.channels != 1 {
            return Err(Error::invalid("fusion inputs must be single-channel maps"));
        }
        let x = self.tape.concat_channels(path, branch)?;
        self.conv(&format!("fuse{index}"), x, 1)
    }

    pub fn aggregate(&mut self, fused: [Var; 3]) -> Result<Var> {
        let s0 = self.tape.shape(fused[0]);
        for &f in &fused[1..] {
            let s = self.tape.shape(f);
            if s != s0 {
                return Err(Error::invalid(format!("aggregate: map shapes {s0} and {s} differ")));
            }
        }
        match self.config.aggregation {
            Aggregation::Learned => {
                let x = self.tape.concat_channels(fused[0], fused[1])?;
                let x = self.tape.concat_channels(x, fused[2])?;
                self.conv("final", x, 1)
            }
            Aggregation::Mean => {
                let x = self.tape.add(fused[0], fused[1])?;
                let x = self.tape.add(x, fused[2])?;
                Ok(self.tape.scale(x, 1.0 / 3.0))
            }
        }
    }

    pub fn forward(&mut self, image: Var) -> Result<ForwardVars> {
        let s = self.tape.shape(image);
        let out = (s.height, s.width);
        let taps = self.backbone(image)?;
        let mut paths = [image; 3];
        let mut branches = [image; 3];
        let mut fused = [image; 3];
        for i in 1..=3 {
            paths[i - 1] = self.path(taps.pool5, i, out)?;
            branches[i - 1] = self.side_branch(taps.branch_tap(i)?, i, out)?;
            fused[i - 1] = self.fuse(paths[i - 1], branches[i - 1], i)?;
        }
        let final_logits = self.aggregate(fused)?;
        let probability = self.tape.sigmoid(final_logits);
        Ok(ForwardVars {
            paths,
            branches,
            fused,
            final_logits,
            probability,
        })
    }
}

/// Value-level entry points; each builds a gradient-free tape internally.
impl NetworkParams {
    fn with_graph<T>(&self, f: impl FnOnce(&mut Graph<'_>) -> Result<T>) -> Result<T> {
        let mut tape = Tape::new();
        let mut graph = Graph::new(&mut tape, self, false)?;
        f(&mut graph)
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<BackboneTaps> {
        self.with_graph(|g| {
            let x = g.tape().leaf(image.clone(), false);
            let taps = g.backbone(x)?;
            let t = g.tape();
            Ok(BackboneTaps {
                conv3_1: t.value(taps.conv3_1).clone(),
                conv4_1: t.value(taps.conv4_1).clone(),
                conv5_1: t.value(taps.conv5_1).clone(),
                pool5: t.value(taps.pool5).clone(),
            })
        })
    }

    pub fn side_branch_forward(&self, tap: &Tensor, index: usize, out_size: (usize, usize)) -> Result<Tensor> {
        self.with_graph(|g| {
            let x = g.tape().leaf(tap.clone(), false);
            let y = g.side_branch(x, index, out_size)?;
            Ok(g.tape().value(y).clone())
        })
    }

    pub fn csm_forward(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        self.with_graph(|g| {
            let v = g.tape().leaf(x.clone(), false);
            let y = g.csm(v, index)?;
            Ok(g.tape().value(y).clone())
        })
    }

    pub fn path_forward(&self, pool5: &Tensor, index: usize, out_size: (usize, usize)) -> Result<Tensor> {
        self.with_graph(|g| {
            let v = g.tape().leaf(pool5.clone(), false);
            let y = g.path(v, index, out_size)?;
            Ok(g.tape().value(y).clone())
        })
    }

    pub fn fuse_path(&self, path: &Tensor, branch: &Tensor, index: usize) -> Result<Tensor> {
        self.with_graph(|g| {
            let p = g.tape().leaf(path.clone(), false);
            let b = g.tape().leaf(branch.clone(), false);
            let y = g.fuse(p, b, index)?;
            Ok(g.tape().value(y).clone())
        })
    }

    pub fn aggregate_final(&self, f1: &Tensor, f2: &Tensor, f3: &Tensor) -> Result<Tensor> {
        self.with_graph(|g| {
            let vars = [f1, f2, f3].map(|f| g.tape().leaf(f.clone(), false));
            let y = g.aggregate(vars)?;
            Ok(g.tape().value(y).clone())
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutputs> {
        self.with_graph(|g| {
            let x = g.tape().leaf(image.clone(), false);
            let v = g.forward(x)?;
            let t = g.tape();
            let get = |vars: [Var; 3]| vars.map(|v| t.value(v).clone());
            Ok(ForwardOutputs {
                paths: get(v.paths),
                branches: get(v.branches),
                fused: get(v.fused),
                final_logits: t.value(v.final_logits).clone(),
                probability: t.value(v.probability).clone(),
            })
        })
    }

    /// Full forward pass to a per-pixel foreground probability.
    pub fn infer_probability_map(&self, image: &Tensor) -> Result<ProbabilityMap> {
        let prob = self.with_graph(|g| {
            let x = g.tape().leaf(image.clone(), false);
            let v = g.forward(x)?;
            Ok(g.tape().value(v.probability).clone())
        })?;
        ProbabilityMap::from_tensor(&prob)
    }
}
