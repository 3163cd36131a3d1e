use std::sync::Arc;

use ins_autograd::{Adam, AdamConfig, Binding, Tape, Tensor, Trainable, Var};
use ndarray::{Array2, IxDyn};
use rand::Rng;

use super::{
    check_finite, mean_over_styles, periodic, require_kind, require_styles, step_rng, AuxTerm,
    Monitor, Perceptual, StepRecord, TrainConfig,
};
use crate::checkpoint::{Checkpoint, Phase};
use crate::dataio::{Image, PosedImageSet, StyleSet};
use crate::error::{InsError, Result};
use crate::fields::{prefix, FieldConfig, FieldKind, InsField, StyleCode};
use crate::losses::{
    recon_loss_on_tape, style_loss, total_loss, FeatureExtractor, LayerKey, LossBreakdown,
    LossTerms, LossWeights,
};
use crate::rendering::{
    intersection_on_tape, midpoint_samples, sphere_trace_field, Ray, TraceOptions, GRAZING_EPS,
};
use crate::sampling::{all_pixels, camera_rays, stride_patch};

/// Rays whose trace converged on the surface, with the frozen quantities of
/// the first-order intersection.
pub(super) struct Surface {
    /// Indices into the traced ray list.
    pub(super) index: Vec<usize>,
    origins: Tensor,
    dirs: Tensor,
    pub(super) t0: Tensor,
    den: Tensor,
}

/// Traces `rays` and keeps converged, non-grazing hits for which `keep`
/// holds.
pub(super) fn trace_surface(
    field: &InsField,
    rays: &[Ray],
    keep: impl Fn(usize) -> bool,
) -> Surface {
    let traces = sphere_trace_field(field, rays, &TraceOptions::default());
    let cand: Vec<usize> = (0..rays.len())
        .filter(|&i| traces[i].converged && keep(i))
        .collect();
    let mut x0 = Array2::zeros((cand.len(), 3));
    for (row, &i) in cand.iter().enumerate() {
        let p = rays[i].at(traces[i].t);
        for a in 0..3 {
            x0[[row, a]] = p[a];
        }
    }
    let grad = field.sdf_gradient_batch(&x0);
    let mut s = Surface {
        index: vec![],
        origins: Tensor::zeros(IxDyn(&[0])),
        dirs: Tensor::zeros(IxDyn(&[0])),
        t0: Tensor::zeros(IxDyn(&[0])),
        den: Tensor::zeros(IxDyn(&[0])),
    };
    let (mut o, mut d, mut t, mut dn) = (vec![], vec![], vec![], vec![]);
    for (row, &i) in cand.iter().enumerate() {
        let v = rays[i].direction;
        let den = grad[[row, 0]] * v[0] + grad[[row, 1]] * v[1] + grad[[row, 2]] * v[2];
        if !(den.abs() >= GRAZING_EPS) {
            continue;
        }
        s.index.push(i);
        o.extend(rays[i].origin);
        d.extend(v);
        t.push(traces[i].t);
        dn.push(den);
    }
    let n = s.index.len();
    s.origins = Tensor::from_shape_vec(IxDyn(&[n, 3]), o).expect("n×3");
    s.dirs = Tensor::from_shape_vec(IxDyn(&[n, 3]), d).expect("n×3");
    s.t0 = Tensor::from_shape_vec(IxDyn(&[n, 1]), t).expect("n×1");
    s.den = Tensor::from_shape_vec(IxDyn(&[n, 1]), dn).expect("n×1");
    s
}

/// Differentiable surface points, unit normals and embeddings of `surface`.
pub(super) struct Shading<'t> {
    pub(super) points: Var<'t>,
    pub(super) normals: Var<'t>,
    pub(super) dirs: Var<'t>,
    pub(super) embedding: Var<'t>,
}

pub(super) fn shading<'t>(
    field: &InsField,
    p: &Binding<'t, '_>,
    s: &Surface,
) -> Result<Shading<'t>> {
    let tape = p.tape();
    let dirs = tape.constant(s.dirs.clone());
    let points = intersection_on_tape(
        tape.constant(s.origins.clone()),
        dirs,
        &s.t0,
        &s.den,
        |x0| field.sdf_values(p, x0).0,
    )?;
    let e = field.sdf_with_gradient(p, points);
    let norm = e.gradient.square().sum_axis(1).sqrt().clamp_min(1e-12);
    Ok(Shading {
        points,
        normals: e.gradient.div(&norm),
        dirs,
        embedding: e.embedding,
    })
}

fn color<'t>(field: &InsField, p: &Binding<'t, '_>, sh: &Shading<'t>, style: Var<'t>) -> Var<'t> {
    field.sdf_render_head(p, sh.points, sh.normals, sh.dirs, sh.embedding, style)
}

/// Binary cross-entropy between `sigmoid(-alpha * min_k f)` along each ray
/// and the mask, divided by `alpha`.
fn silhouette_loss<'t>(
    field: &InsField,
    p: &Binding<'t, '_>,
    rays: &[Ray],
    inside: &[f64],
    samples: usize,
    alpha: f64,
) -> Result<Var<'t>> {
    let tape = p.tape();
    let mut pts = Vec::with_capacity(rays.len() * samples * 3);
    for ray in rays {
        for t in midpoint_samples(ray, samples)?.depths {
            pts.extend(ray.at(t));
        }
    }
    let pts = Tensor::from_shape_vec(IxDyn(&[rays.len() * samples, 3]), pts).expect("RK×3");
    let (f, _) = field.sdf_values(p, tape.constant(pts));
    let fv = f.value();
    let argmin: Vec<usize> = (0..rays.len())
        .map(|r| {
            let row = (0..samples).map(|k| fv[[r * samples + k, 0]]);
            let k = row
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .expect("samples >= 1");
            r * samples + k
        })
        .collect();
    let s = f.index_select(Arc::new(argmin));
    let z = s.scale(-alpha);
    let m = tape
        .constant(Tensor::from_shape_vec(IxDyn(&[rays.len(), 1]), inside.to_vec()).expect("R×1"));
    Ok(z.softplus(1.0).sub(&z.mul(&m)).mean().scale(1.0 / alpha))
}

/// Mean squared deviation of `|grad f|` from one.
fn eikonal_loss<'t>(field: &InsField, p: &Binding<'t, '_>, points: Tensor) -> Var<'t> {
    let e = field.sdf_with_gradient(p, p.tape().constant(points));
    e.gradient
        .square()
        .sum_axis(1)
        .sqrt()
        .add_scalar(-1.0)
        .square()
        .mean()
}

/// Multi-view surface reconstruction from masked images.
///
/// Each step traces a random ray batch. Rays that hit the surface inside the
/// mask contribute a photometric loss through the differentiable
/// intersection; every other ray contributes a silhouette loss; an eikonal
/// term keeps the network a distance function.
pub fn pretrain_sdf(
    scene: &PosedImageSet,
    field_cfg: &FieldConfig,
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
    monitor: &mut dyn Monitor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    require_kind(field_cfg, FieldKind::Sdf, "pretrain_sdf")?;
    let masks = scene
        .masks
        .as_ref()
        .ok_or_else(|| InsError::Data("surface pretraining needs masked views".into()))?;
    if scene.is_empty() {
        return Err(InsError::Data("scene has no views".into()));
    }
    let (mut field, mut adam, start) = match resume {
        Some(c) => {
            if c.phase != Phase::Pretrain || c.field.config() != field_cfg {
                return Err(InsError::Config(
                    "resume checkpoint is not a pretraining state of this field".into(),
                ));
            }
            (c.field, c.optimizer, c.step)
        }
        None => (
            InsField::new(field_cfg.clone(), cfg.seed)?,
            Adam::new(AdamConfig::default()),
            0,
        ),
    };
    let mut rays = vec![];
    let mut colors = vec![];
    let mut inside = vec![];
    for ((img, cam), mask) in scene.images.iter().zip(&scene.cameras).zip(masks) {
        rays.extend(camera_rays(cam, &all_pixels(img.height, img.width))?.rays);
        colors.extend_from_slice(&img.pixels);
        inside.extend_from_slice(mask);
    }
    let zero = StyleCode::zeros(field_cfg.n_styles);
    let weights = LossWeights {
        phase_boundary: u64::MAX,
        ..cfg.weights
    };
    let terms_cfg = cfg.sdf;
    let snapshot = cfg.snapshot();
    let checkpoint = |field: &InsField, adam: &Adam, step: u64| Checkpoint {
        field: field.clone(),
        frozen: None,
        optimizer: adam.clone(),
        step,
        phase: Phase::Pretrain,
        config: snapshot.clone(),
    };

    for step in start..cfg.pretrain_steps {
        let mut rng = step_rng(cfg.seed, step);
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..rays.len()))
            .collect();
        let batch: Vec<Ray> = idx.iter().map(|&i| rays[i]).collect();
        let surface = trace_surface(&field, &batch, |j| inside[idx[j]]);
        let mut on_surface = vec![false; batch.len()];
        for &j in &surface.index {
            on_surface[j] = true;
        }
        let b = cfg.sdf.bound;
        let n_eik = (cfg.batch / 2).max(1);
        let eik_pts: Vec<f64> = (0..n_eik * 3).map(|_| rng.random_range(-b..b)).collect();
        let eik_pts = Tensor::from_shape_vec(IxDyn(&[n_eik, 3]), eik_pts).expect("n×3");

        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), Trainable::All);
        let recon = if surface.index.is_empty() {
            None
        } else {
            let sh = shading(&field, &p, &surface)?;
            let style = field.style_features(&p, &zero)?;
            let c = color(&field, &p, &sh, style);
            let target: Vec<f64> = surface.index.iter().flat_map(|&j| colors[idx[j]]).collect();
            let target =
                Tensor::from_shape_vec(IxDyn(&[surface.index.len(), 3]), target).expect("n×3");
            Some(recon_loss_on_tape(c, &target)?)
        };
        let off: Vec<usize> = (0..batch.len()).filter(|&j| !on_surface[j]).collect();
        let mask_term = if off.is_empty() {
            None
        } else {
            let off_rays: Vec<Ray> = off.iter().map(|&j| batch[j]).collect();
            let flags: Vec<f64> = off
                .iter()
                .map(|&j| if inside[idx[j]] { 1.0 } else { 0.0 })
                .collect();
            Some(silhouette_loss(
                &field,
                &p,
                &off_rays,
                &flags,
                cfg.samples,
                terms_cfg.mask_sharpness,
            )?)
        };
        let eik = eikonal_loss(&field, &p, eik_pts);

        let terms = LossTerms {
            recon,
            ..Default::default()
        };
        let (mut total, mut log) = total_loss(&tape, &terms, &weights, step);
        let mut aux = vec![];
        for (name, w, v) in [
            ("mask", terms_cfg.mask_weight, mask_term),
            ("eikonal", terms_cfg.eikonal_weight, Some(eik)),
        ] {
            if let Some(v) = v {
                aux.push(AuxTerm {
                    name: name.into(),
                    weight: w,
                    value: v.item(),
                });
                if w != 0.0 {
                    total = total.add(&v.scale(w));
                }
            }
        }
        log.total = total.item();
        check_finite(&log, &aux, step)?;
        let grads = p.gradients(&tape.backward(total));
        adam.step(field.params_mut(), &grads, |_| cfg.pretrain_lr(step));
        monitor.on_step(&StepRecord {
            phase: Phase::Pretrain,
            step,
            loss: log,
            weights: weights.at(step),
            aux,
            skipped: false,
        });
        if periodic(cfg, step) {
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1))?;
        }
    }
    Ok(checkpoint(&field, &adam, start.max(cfg.pretrain_steps)))
}

/// `image` with every pixel outside `mask` set to black.
pub fn masked_patch(image: &Image, mask: &[bool]) -> Result<Image> {
    if mask.len() != image.pixels.len() {
        return Err(InsError::Argument(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            image.pixels.len()
        )));
    }
    let pixels = image
        .pixels
        .iter()
        .zip(mask)
        .map(|(p, &m)| if m { *p } else { [0.0; 3] })
        .collect();
    Image::new(image.height, image.width, pixels)
}

/// Style loss of the masked region only.
pub fn masked_style_loss(
    extractor: &FeatureExtractor,
    rendered: &Image,
    mask: &[bool],
    style: &Image,
    keys: &[LayerKey],
) -> Result<f64> {
    style_loss(extractor, &masked_patch(rendered, mask)?, style, keys)
}

/// Stylizes a pretrained surface. Perceptual losses see the patch with
/// background and missed pixels black. The SDF network trains at
/// `lr * geometry_lr_multiplier`; a multiplier of zero freezes it.
pub fn stylize_sdf(
    pretrained: &Checkpoint,
    scene: &PosedImageSet,
    styles: &StyleSet,
    cfg: &TrainConfig,
    extractor: &FeatureExtractor,
    monitor: &mut dyn Monitor,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if pretrained.phase != Phase::Pretrain {
        return Err(InsError::Config(format!(
            "stylization starts from a pretraining checkpoint, got phase `{}`",
            pretrained.phase
        )));
    }
    let field_cfg = pretrained.field.config().clone();
    require_kind(&field_cfg, FieldKind::Sdf, "stylize_sdf")?;
    require_styles(&field_cfg, styles)?;
    let masks = scene
        .masks
        .as_ref()
        .ok_or_else(|| InsError::Data("surface stylization needs masked views".into()))?;
    if scene.is_empty() {
        return Err(InsError::Data("scene has no views".into()));
    }
    let perceptual = Perceptual::new(extractor, cfg, styles)?;
    let mut field = pretrained.field.clone();
    let mut adam = Adam::new(AdamConfig::default());
    let geometry_frozen = cfg.geometry_lr_multiplier == 0.0;
    let trainable = || {
        if geometry_frozen {
            Trainable::Prefixes(vec![prefix::SIM.into(), prefix::AM.into()])
        } else {
            Trainable::All
        }
    };
    let lr = |name: &str| {
        if name.starts_with(prefix::CIM) {
            cfg.stylize_lr() * cfg.geometry_lr_multiplier
        } else {
            cfg.stylize_lr()
        }
    };
    let weights = LossWeights {
        phase_boundary: 0,
        geometry: 0.0,
        ..cfg.weights
    };
    let start = pretrained.step;
    let snapshot = cfg.snapshot();
    let checkpoint = |field: &InsField, adam: &Adam, step: u64| Checkpoint {
        field: field.clone(),
        frozen: None,
        optimizer: adam.clone(),
        step,
        phase: Phase::Stylize,
        config: snapshot.clone(),
    };
    let k = cfg.patch_size;

    for step in start..start + cfg.stylize_steps {
        let mut rng = step_rng(cfg.seed, step);
        let view = rng.random_range(0..scene.len());
        let (img, cam, mask) = (&scene.images[view], &scene.cameras[view], &masks[view]);
        let patch = stride_patch(img.height, img.width, k, cfg.stride, &mut rng)?;
        let batch = camera_rays(cam, &patch.pixels)?;
        let in_mask: Vec<bool> = patch
            .pixels
            .iter()
            .map(|&(r, c)| mask[r * img.width + c])
            .collect();
        let surface = trace_surface(&field, &batch.rays, |j| in_mask[j]);
        if surface.index.is_empty() {
            log::warn!("step {step}: patch of view {view} has no surface pixels, skipped");
            monitor.on_step(&StepRecord {
                phase: Phase::Stylize,
                step,
                loss: LossBreakdown::default(),
                weights,
                aux: vec![],
                skipped: true,
            });
            continue;
        }
        let reference_img = masked_patch(
            &Image::from_tensor(k, k, &img.gather(&patch.pixels))?,
            &in_mask,
        )?;
        let reference = perceptual.reference(&reference_img)?;
        let target: Vec<f64> = surface
            .index
            .iter()
            .flat_map(|&j| reference_img.pixels[j])
            .collect();
        let target = Tensor::from_shape_vec(IxDyn(&[surface.index.len(), 3]), target).expect("n×3");
        // Patch pixel j reads hit row `slot[j]`; the extra last row is black.
        let mut slot = vec![surface.index.len(); k * k];
        for (row, &j) in surface.index.iter().enumerate() {
            slot[j] = row;
        }
        let slot = Arc::new(slot);

        let tape = Tape::new();
        let p = Binding::new(&tape, field.params(), trainable());
        let sh = shading(&field, &p, &surface)?;
        let black = tape.constant(Tensor::zeros(IxDyn(&[1, 3])));
        let mut parts = Vec::with_capacity(styles.len());
        for (i, code) in styles.codes.iter().enumerate() {
            let s = field.style_features(&p, code)?;
            let c = color(&field, &p, &sh, s);
            let patch_img = Var::concat(&[c, black], 0).index_select(Arc::clone(&slot));
            let (content, style) = perceptual.terms(patch_img, k, &reference, i)?;
            let terms = LossTerms {
                recon: Some(recon_loss_on_tape(c, &target)?),
                geometry: None,
                content: Some(content),
                style: Some(style),
            };
            parts.push(total_loss(&tape, &terms, &weights, step));
        }
        let (total, log) = mean_over_styles(&tape, parts);
        check_finite(&log, &[], step)?;
        let grads = p.gradients(&tape.backward(total));
        adam.step(field.params_mut(), &grads, lr);
        monitor.on_step(&StepRecord {
            phase: Phase::Stylize,
            step,
            loss: log,
            weights,
            aux: vec![],
            skipped: false,
        });
        if periodic(cfg, step - start) {
            monitor.on_checkpoint(&checkpoint(&field, &adam, step + 1))?;
        }
    }
    Ok(checkpoint(&field, &adam, start + cfg.stylize_steps))
}
