use std::f64::consts::PI;

use ins_autograd::{Binding, ParamSet, Tape, Tensor, Trainable, Var};
use ndarray::{Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::encoding::{encode, encode_with_jacobian, encoded_width};
use super::layers::{Activation, Dense};
use super::{FieldConfig, FieldKind, FieldOutput, SdfSurfacePoint, StyleCode};
use crate::error::{InsError, Result};

/// Content-module output for a batch of `N` points.
pub struct ContentFeatures<'t> {
    /// `N×width` features handed to AM.
    pub features: Var<'t>,
    /// `N×1` pre-activation density (radiance field).
    pub density_logit: Option<Var<'t>>,
}

/// Field output on the tape.
pub struct FieldEval<'t> {
    /// `N×3`, in `[0, 1]`.
    pub color: Var<'t>,
    /// `N×1`, non-negative (radiance field only).
    pub density: Option<Var<'t>>,
}

/// Signed distance with its spatial gradient and appearance embedding.
pub struct SdfEval<'t> {
    /// `N×1`.
    pub distance: Var<'t>,
    /// `N×3`, exact derivative of `distance` w.r.t. the query point.
    pub gradient: Var<'t>,
    /// `N×F`.
    pub embedding: Var<'t>,
}

#[derive(Clone, Debug)]
struct Layout {
    sim: Vec<Dense>,
    cim: Vec<Dense>,
    /// Layer whose input is `[hidden | encoded position]`.
    cim_skip: Option<usize>,
    cim_density: Option<Dense>,
    cim_out: Option<Dense>,
    am: Vec<Dense>,
    /// Widths of the blocks concatenated at AM's input, style block last.
    am_blocks: Vec<usize>,
    am_color: Dense,
    am_density: Option<Dense>,
}

impl Layout {
    fn new(c: &FieldConfig) -> Self {
        let sim = (0..c.sim_depth)
            .map(|i| {
                let fan_in = if i == 0 { c.n_styles } else { c.sim_width };
                let fan_out = if i + 1 == c.sim_depth {
                    c.style_width
                } else {
                    c.sim_width
                };
                Dense::new(&format!("sim.l{i}"), fan_in, fan_out)
            })
            .collect();

        let cim_in = match c.kind {
            FieldKind::Siren => 2,
            FieldKind::Nerf | FieldKind::Sdf => encoded_width(3, c.pos_freqs),
        };
        let cim_skip =
            (c.kind == FieldKind::Nerf && c.cim_depth > 4).then_some(c.cim_depth / 2 + 1);
        let cim = (0..c.cim_depth)
            .map(|i| {
                let mut fan_in = if i == 0 { cim_in } else { c.cim_width };
                if Some(i) == cim_skip {
                    fan_in += cim_in;
                }
                Dense::new(&format!("cim.l{i}"), fan_in, c.cim_width)
            })
            .collect();
        let cim_density =
            (c.kind == FieldKind::Nerf).then(|| Dense::new("cim.density", c.cim_width, 1));
        let cim_out = (c.kind == FieldKind::Sdf)
            .then(|| Dense::new("cim.out", c.cim_width, 1 + c.sdf_feature_width));

        let am_blocks = match c.kind {
            FieldKind::Siren => vec![c.cim_width, c.style_width],
            FieldKind::Nerf => vec![c.cim_width, encoded_width(3, c.dir_freqs), c.style_width],
            FieldKind::Sdf => vec![3, 3, 3, c.sdf_feature_width, c.style_width],
        };
        let am_in: usize = am_blocks.iter().sum();
        let am = (0..c.am_depth)
            .map(|i| {
                let fan_in = if i == 0 { am_in } else { c.am_width };
                Dense::new(&format!("am.l{i}"), fan_in, c.am_width)
            })
            .collect();
        let am_color = Dense::new("am.color", c.am_width, 3);
        let am_density =
            (c.kind == FieldKind::Nerf).then(|| Dense::new("am.density", c.am_width, 1));
        Self {
            sim,
            cim,
            cim_skip,
            cim_density,
            cim_out,
            am,
            am_blocks,
            am_color,
            am_density,
        }
    }

    fn all(&self) -> impl Iterator<Item = &Dense> {
        self.sim
            .iter()
            .chain(&self.cim)
            .chain(&self.cim_density)
            .chain(&self.cim_out)
            .chain(&self.am)
            .chain(std::iter::once(&self.am_color))
            .chain(&self.am_density)
    }
}

/// Parameter-name prefixes of the three modules.
pub mod prefix {
    pub const SIM: &str = "sim.";
    pub const CIM: &str = "cim.";
    pub const AM: &str = "am.";
    pub const AM_DENSITY: &str = "am.density.";
}

/// A conditional implicit field: configuration plus named parameters.
#[derive(Clone, Debug)]
pub struct InsField {
    config: FieldConfig,
    params: ParamSet,
    layout: Layout,
}

impl PartialEq for InsField {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl InsField {
    /// Freshly initialized field; identical seeds give identical parameters.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();

        for (i, layer) in layout.sim.iter().enumerate() {
            if i == 0 {
                // All codes map to the same features until stylization trains
                // these columns.
                layer.init_zero_weight(&mut params, &mut rng);
            } else {
                layer.init_default(&mut params, &mut rng);
            }
        }

        match config.kind {
            FieldKind::Siren => {
                for (i, layer) in layout.cim.iter().enumerate() {
                    layer.init_siren(&mut params, &mut rng, i == 0, config.omega0);
                }
                for layer in &layout.am {
                    layer.init_siren(&mut params, &mut rng, false, config.omega0);
                }
                layout
                    .am_color
                    .init_siren(&mut params, &mut rng, false, config.omega0);
            }
            FieldKind::Nerf => {
                for layer in layout.cim.iter().chain(&layout.cim_density) {
                    layer.init_default(&mut params, &mut rng);
                }
                for layer in layout.am.iter().chain(std::iter::once(&layout.am_color)) {
                    layer.init_default(&mut params, &mut rng);
                }
                if let Some(d) = &layout.am_density {
                    d.init_zero(&mut params);
                }
            }
            FieldKind::Sdf => {
                init_geometric(&layout, &config, &mut params, &mut rng);
                for layer in layout.am.iter().chain(std::iter::once(&layout.am_color)) {
                    layer.init_default(&mut params, &mut rng);
                }
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a field from stored parameters, rejecting missing, misshapen
    /// or non-finite arrays.
    pub fn from_parts(config: FieldConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut expected = 0;
        for layer in layout.all() {
            for (name, shape) in layer.shapes() {
                expected += 1;
                let t = params
                    .get(name)
                    .ok_or_else(|| InsError::Corrupted(format!("missing parameter `{name}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(InsError::Corrupted(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
            }
        }
        if params.len() != expected {
            return Err(InsError::Corrupted(format!(
                "{} parameters present, architecture expects {expected}",
                params.len()
            )));
        }
        if let Some(bad) = params.first_non_finite() {
            return Err(InsError::Corrupted(format!(
                "parameter `{bad}` holds non-finite values"
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn kind(&self) -> FieldKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Only the content-module parameters.
    pub fn content_params(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix::CIM))
        {
            out.insert(k, v.clone());
        }
        out
    }

    /// `1×w` style features for `code`.
    pub fn style_features<'t>(&self, p: &Binding<'t, '_>, code: &StyleCode) -> Result<Var<'t>> {
        self.config.check_code(code)?;
        let tape = p.tape();
        let code = Tensor::from_shape_vec(IxDyn(&[1, code.len()]), code.weights().to_vec())
            .expect("code shape");
        let mut h = tape.constant(code);
        let last = self.layout.sim.len() - 1;
        for (i, layer) in self.layout.sim.iter().enumerate() {
            h = layer.forward(p, h);
            if i != last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// CIM on raw inputs: pixel coordinates (`N×2`, SIREN) or positions
    /// (`N×3`, radiance field). The binding may point at a frozen copy.
    pub fn content<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> ContentFeatures<'t> {
        let c = &self.config;
        match c.kind {
            FieldKind::Siren => {
                let mut h = x;
                for layer in &self.layout.cim {
                    h = Activation::Sine(c.omega0).apply(layer.forward(p, h));
                }
                ContentFeatures {
                    features: h,
                    density_logit: None,
                }
            }
            FieldKind::Nerf => {
                let enc = encode(x, c.pos_freqs);
                let mut h = enc;
                for (i, layer) in self.layout.cim.iter().enumerate() {
                    if Some(i) == self.layout.cim_skip {
                        h = Var::concat(&[h, enc], 1);
                    }
                    h = layer.forward(p, h).relu();
                }
                let logit = self
                    .layout
                    .cim_density
                    .as_ref()
                    .expect("radiance field density head")
                    .forward(p, h);
                ContentFeatures {
                    features: h,
                    density_logit: Some(logit),
                }
            }
            FieldKind::Sdf => {
                let e = self.sdf_values(p, x);
                ContentFeatures {
                    features: e.1,
                    density_logit: None,
                }
            }
        }
    }

    /// AM first layer applied to the concatenation of `blocks` (style block
    /// last, may be a single broadcast row).
    fn am_input<'t>(&self, p: &Binding<'t, '_>, blocks: &[Var<'t>]) -> Var<'t> {
        debug_assert_eq!(blocks.len(), self.layout.am_blocks.len());
        let first = &self.layout.am[0];
        let mut offset = 0;
        let mut acc: Option<Var<'t>> = None;
        for (block, &width) in blocks.iter().zip(&self.layout.am_blocks) {
            let w = first.weight_rows(p, offset, width);
            let part = block.matmul(&w);
            acc = Some(match acc {
                None => part,
                Some(a) => a.add(&part),
            });
            offset += width;
        }
        acc.expect("AM has inputs").add(&p.get(&first.bias))
    }

    fn am_trunk<'t>(&self, p: &Binding<'t, '_>, blocks: &[Var<'t>]) -> Var<'t> {
        let act = match self.config.kind {
            FieldKind::Siren => Activation::Sine(self.config.omega0),
            FieldKind::Nerf | FieldKind::Sdf => Activation::Relu,
        };
        let mut h = act.apply(self.am_input(p, blocks));
        for layer in &self.layout.am[1..] {
            h = act.apply(layer.forward(p, h));
        }
        h
    }

    /// Fuses content and style features. `dirs` are unit view directions
    /// (`N×3`) for the radiance field.
    pub fn amalgamate<'t>(
        &self,
        p: &Binding<'t, '_>,
        content: &ContentFeatures<'t>,
        dirs: Option<Var<'t>>,
        style: Var<'t>,
    ) -> FieldEval<'t> {
        let c = &self.config;
        let blocks = match c.kind {
            FieldKind::Siren => vec![content.features, style],
            FieldKind::Nerf => {
                let d = dirs.expect("radiance field needs view directions");
                vec![content.features, encode(d, c.dir_freqs), style]
            }
            FieldKind::Sdf => panic!("use sdf_render_head for signed-distance fields"),
        };
        let h = self.am_trunk(p, &blocks);
        let color = self.layout.am_color.forward(p, h).sigmoid();
        let density = content.density_logit.map(|logit| {
            let logit = if c.style_density_enabled {
                let delta = self
                    .layout
                    .am_density
                    .as_ref()
                    .expect("density delta head")
                    .forward(p, h);
                logit.add(&delta)
            } else {
                logit
            };
            logit.softplus(1.0)
        });
        FieldEval { color, density }
    }

    /// Full conditional query for SIREN / radiance fields.
    pub fn forward<'t>(
        &self,
        p: &Binding<'t, '_>,
        x: Var<'t>,
        dirs: Option<Var<'t>>,
        code: &StyleCode,
    ) -> Result<FieldEval<'t>> {
        if self.config.kind == FieldKind::Sdf {
            return Err(InsError::Config(
                "signed-distance fields are queried through sdf_render_head".into(),
            ));
        }
        let style = self.style_features(p, code)?;
        let content = self.content(p, x);
        Ok(self.amalgamate(p, &content, dirs, style))
    }

    /// Density from the content module alone, `softplus(cim logit)`; with a
    /// binding over a frozen copy this is the distillation target.
    pub fn content_density<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.content(p, x)
            .density_logit
            .expect("radiance field")
            .softplus(1.0)
    }

    /// Signed distance (`N×1`) and embedding (`N×F`) at `N×3` points.
    pub fn sdf_values<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let c = &self.config;
        let act = Activation::Softplus(c.sdf_softplus_beta);
        let mut h = encode(x, c.pos_freqs);
        for layer in &self.layout.cim {
            h = act.apply(layer.forward(p, h));
        }
        let out = self
            .layout
            .cim_out
            .as_ref()
            .expect("sdf head")
            .forward(p, h);
        (out.narrow(1, 0, 1), out.narrow(1, 1, c.sdf_feature_width))
    }

    /// Signed distance with its exact spatial gradient, computed by
    /// propagating the input Jacobian through every layer; the result stays
    /// differentiable with respect to parameters and points.
    pub fn sdf_with_gradient<'t>(&self, p: &Binding<'t, '_>, x: Var<'t>) -> SdfEval<'t> {
        let c = &self.config;
        let beta = c.sdf_softplus_beta;
        let n = x.shape()[0];
        let (mut h, mut jac) = encode_with_jacobian(x, c.pos_freqs);
        for layer in &self.layout.cim {
            let z = layer.forward(p, h);
            let jz = jac.matmul(&p.get(&layer.weight));
            let slope = z.scale(beta).sigmoid();
            h = z.softplus(beta);
            jac = jz.mul(&Var::concat(&[slope, slope, slope], 0));
        }
        let head = self.layout.cim_out.as_ref().expect("sdf head");
        let out = head.forward(p, h);
        let jout = jac.matmul(&p.get(&head.weight).narrow(1, 0, 1));
        let gradient = jout.reshape(&[3, n]).t();
        SdfEval {
            distance: out.narrow(1, 0, 1),
            gradient,
            embedding: out.narrow(1, 1, c.sdf_feature_width),
        }
    }

    /// Rendering head `r(x, n, d, embedding, style)` for `N` surface points.
    pub fn sdf_render_head<'t>(
        &self,
        p: &Binding<'t, '_>,
        points: Var<'t>,
        normals: Var<'t>,
        dirs: Var<'t>,
        embedding: Var<'t>,
        style: Var<'t>,
    ) -> Var<'t> {
        let h = self.am_trunk(p, &[points, normals, dirs, embedding, style]);
        self.layout.am_color.forward(p, h).sigmoid()
    }

    /// Value-only query at one point.
    pub fn query(&self, x: &[f64], dir: Option<[f64; 3]>, code: &StyleCode) -> Result<FieldOutput> {
        let tape = Tape::new();
        let p = Binding::new(&tape, &self.params, Trainable::None);
        let xv = tape.constant(row(x));
        match self.config.kind {
            FieldKind::Sdf => {
                self.config.check_code(code)?;
                let (f, _) = self.sdf_values(&p, xv);
                let e = self.sdf_with_gradient(&p, xv);
                let grad = e.gradient.value();
                let g = [grad[[0, 0]], grad[[0, 1]], grad[[0, 2]]];
                let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
                let point = SdfSurfacePoint {
                    position: [x[0], x[1], x[2]],
                    normal: [g[0] / norm, g[1] / norm, g[2] / norm],
                    embedding: e.embedding.value().iter().copied().collect(),
                    view_dir: dir.unwrap_or([0.0, 0.0, -1.0]),
                };
                let color = self.shade(&point, code)?;
                Ok(FieldOutput {
                    color,
                    density: None,
                    distance: Some(f.item()),
                })
            }
            _ => {
                let d = dir.map(|d| tape.constant(row(&d)));
                let out = self.forward(&p, xv, d, code)?;
                let c = out.color.value();
                Ok(FieldOutput {
                    color: [c[[0, 0]], c[[0, 1]], c[[0, 2]]],
                    density: out.density.map(|d| d.item()),
                    distance: None,
                })
            }
        }
    }

    /// Value-only rendering head at one surface point.
    pub fn shade(&self, point: &SdfSurfacePoint, code: &StyleCode) -> Result<[f64; 3]> {
        if self.config.kind != FieldKind::Sdf {
            return Err(InsError::Config(
                "shade needs a signed-distance field".into(),
            ));
        }
        point.validate()?;
        if point.embedding.len() != self.config.sdf_feature_width {
            return Err(InsError::Argument(format!(
                "embedding has {} entries, expected {}",
                point.embedding.len(),
                self.config.sdf_feature_width
            )));
        }
        let tape = Tape::new();
        let p = Binding::new(&tape, &self.params, Trainable::None);
        let style = self.style_features(&p, code)?;
        let c = self.sdf_render_head(
            &p,
            tape.constant(row(&point.position)),
            tape.constant(row(&point.normal)),
            tape.constant(row(&point.view_dir)),
            tape.constant(row(&point.embedding)),
            style,
        );
        let c = c.value();
        Ok([c[[0, 0]], c[[0, 1]], c[[0, 2]]])
    }

    /// Signed distances at the rows of `points` (`N×3`).
    pub fn sdf_batch(&self, points: &Array2<f64>) -> Vec<f64> {
        let tape = Tape::new();
        let p = Binding::new(&tape, &self.params, Trainable::None);
        let (f, _) = self.sdf_values(&p, tape.constant(points.clone().into_dyn()));
        let v = f.value();
        v.iter().copied().collect()
    }

    /// Exact spatial gradients at the rows of `points`.
    pub fn sdf_gradient_batch(&self, points: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let p = Binding::new(&tape, &self.params, Trainable::None);
        let e = self.sdf_with_gradient(&p, tape.constant(points.clone().into_dyn()));
        let g = e.gradient.value();
        g.view()
            .into_dimensionality()
            .expect("N×3 gradient")
            .to_owned()
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::from_shape_vec(IxDyn(&[1, v.len()]), v.to_vec()).expect("row shape")
}

/// Geometric initialization: the network starts close to the signed distance
/// of a sphere of radius `sdf_init_radius` centred at the origin.
fn init_geometric(layout: &Layout, c: &FieldConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for (i, layer) in layout.cim.iter().enumerate() {
        let std = 2f64.sqrt() / (layer.fan_out as f64).sqrt();
        layer.init_normal(params, rng, 0.0, std, 0.0);
        if i == 0 && c.pos_freqs > 0 {
            let w = params.get_mut(&layer.weight).expect("just inserted");
            w.slice_axis_mut(Axis(0), (3..layer.fan_in).into())
                .fill(0.0);
        }
    }
    let out = layout.cim_out.as_ref().expect("sdf head");
    out.init_default(params, rng);
    let mean = PI.sqrt() / (out.fan_in as f64).sqrt();
    let dist = Normal::new(mean, 1e-4).expect("valid normal");
    let w = params.get_mut(&out.weight).expect("just inserted");
    for v in w.index_axis_mut(Axis(1), 0).iter_mut() {
        *v = dist.sample(rng) as f32 as f64;
    }
    let b = params.get_mut(&out.bias).expect("just inserted");
    b[0] = (-c.sdf_init_radius) as f32 as f64;
}
