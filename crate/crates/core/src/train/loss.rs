use std::f64::consts::PI;
use std::sync::Arc;

use grapedet_tensor::{Element, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NUM_ANCHORS};
use crate::train::config::LossWeights;
use crate::train::targets::{AssignedTargets, ScaleTargets};

const EPS: f64 = 1e-7;

/// Weighted loss components; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(rename = "box")]
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

pub struct Loss {
    pub total: Var,
    pub components: LossComponents,
}

/// Boxes as centre/size columns of equal length.
#[derive(Clone, Copy)]
pub struct BoxVars {
    pub cx: Var,
    pub cy: Var,
    pub w: Var,
    pub h: Var,
}

/// Differentiable complete IoU. The aspect-ratio trade-off weight is
/// treated as a constant.
pub fn ciou_vars<F: Element>(t: &mut Tape<F>, p: BoxVars, g: BoxVars) -> Var {
    let corners = |t: &mut Tape<F>, b: BoxVars| {
        let hw = t.scale(b.w, 0.5);
        let hh = t.scale(b.h, 0.5);
        [t.sub(b.cx, hw), t.sub(b.cy, hh), t.add(b.cx, hw), t.add(b.cy, hh)]
    };
    let [px1, py1, px2, py2] = corners(t, p);
    let [gx1, gy1, gx2, gy2] = corners(t, g);

    let overlap = |t: &mut Tape<F>, a1, a2, b1, b2| {
        let hi = t.minimum(a2, b2);
        let lo = t.maximum(a1, b1);
        let d = t.sub(hi, lo);
        t.clamp_min(d, 0.0)
    };
    let iw = overlap(t, px1, px2, gx1, gx2);
    let ih = overlap(t, py1, py2, gy1, gy2);
    let inter = t.mul(iw, ih);
    let pa = t.mul(p.w, p.h);
    let ga = t.mul(g.w, g.h);
    let union = t.add(pa, ga);
    let union = t.sub(union, inter);
    let union = t.add_scalar(union, EPS);
    let iou = t.div(inter, union);

    let extent = |t: &mut Tape<F>, a1, a2, b1, b2| {
        let hi = t.maximum(a2, b2);
        let lo = t.minimum(a1, b1);
        t.sub(hi, lo)
    };
    let cw = extent(t, px1, px2, gx1, gx2);
    let ch = extent(t, py1, py2, gy1, gy2);
    let cw2 = t.square(cw);
    let ch2 = t.square(ch);
    let c2 = t.add(cw2, ch2);
    let c2 = t.add_scalar(c2, EPS);
    let dx = t.sub(p.cx, g.cx);
    let dy = t.sub(p.cy, g.cy);
    let dx2 = t.square(dx);
    let dy2 = t.square(dy);
    let rho2 = t.add(dx2, dy2);
    let dist = t.div(rho2, c2);

    let aspect = |t: &mut Tape<F>, b: BoxVars| {
        let h = t.add_scalar(b.h, EPS);
        let r = t.div(b.w, h);
        t.atan(r)
    };
    let ag = aspect(t, g);
    let ap = aspect(t, p);
    let da = t.sub(ag, ap);
    let v = t.square(da);
    let v = t.scale(v, 4.0 / (PI * PI));
    let denom = t.sub(v, iou);
    let denom = t.add_scalar(denom, 1.0 + EPS);
    let alpha = t.div(v, denom);
    let alpha = t.detach(alpha);
    let penalty = t.mul(v, alpha);
    let penalty = t.add(dist, penalty);
    t.sub(iou, penalty)
}

fn scalar<F: Element>(t: &Tape<F>, v: Var) -> f64 {
    t.value(v).data()[0].to_f64().unwrap_or(f64::NAN)
}

fn column<F: Element>(t: &mut Tape<F>, pred: Var, bases: &[usize], k: usize) -> Var {
    let idx: Vec<usize> = bases.iter().map(|b| b + k).collect();
    let n = idx.len();
    t.gather(pred, Arc::new(idx), &[n])
}

fn constant<F: Element>(t: &mut Tape<F>, values: impl Iterator<Item = f64>) -> Var {
    let data: Vec<F> = values.map(F::lit).collect();
    let n = data.len();
    t.constant(Tensor::new(&[n], data).expect("1-d constant"))
}

fn sum_opt<F: Element>(t: &mut Tape<F>, acc: Option<Var>, v: Var) -> Option<Var> {
    Some(match acc {
        Some(a) => t.add(a, v),
        None => v,
    })
}

struct ScaleLoss {
    box_: Option<Var>,
    obj: Var,
    cls: Option<Var>,
}

fn scale_loss<F: Element>(t: &mut Tape<F>, pred: Var, st: &ScaleTargets, batch: usize, nc: usize) -> Result<ScaleLoss> {
    let no = nc + 5;
    let expected = [batch, NUM_ANCHORS, st.grid, st.grid, no];
    if t.shape(pred) != expected {
        return Err(Error::Shape(format!("prediction {:?} does not match targets {:?}", t.shape(pred), expected)));
    }
    let cells = batch * NUM_ANCHORS * st.grid * st.grid;
    let mut obj_target = vec![F::zero(); cells];
    let (mut box_, mut cls) = (None, None);
    let n = st.entries.len();
    if n > 0 {
        let cell_of =
            |e: &crate::train::targets::TargetEntry| ((e.image * NUM_ANCHORS + e.anchor) * st.grid + e.grid_y) * st.grid + e.grid_x;
        let bases: Vec<usize> = st.entries.iter().map(|e| cell_of(e) * no).collect();
        let xy = |t: &mut Tape<F>, k| {
            let raw = column(t, pred, &bases, k);
            let s = t.sigmoid(raw);
            let s = t.scale(s, 2.0);
            t.add_scalar(s, -0.5)
        };
        let px = xy(t, 0);
        let py = xy(t, 1);
        let wh = |t: &mut Tape<F>, k: usize| {
            let raw = column(t, pred, &bases, 2 + k);
            let s = t.sigmoid(raw);
            let s = t.scale(s, 2.0);
            let s = t.square(s);
            let a = constant(t, st.entries.iter().map(|e| e.anchor_size[k]));
            t.mul(s, a)
        };
        let pw = wh(t, 0);
        let ph = wh(t, 1);
        let g = BoxVars {
            cx: constant(t, st.entries.iter().map(|e| e.offset[0])),
            cy: constant(t, st.entries.iter().map(|e| e.offset[1])),
            w: constant(t, st.entries.iter().map(|e| e.size[0])),
            h: constant(t, st.entries.iter().map(|e| e.size[1])),
        };
        let ciou = ciou_vars(t, BoxVars { cx: px, cy: py, w: pw, h: ph }, g);
        let m = t.mean(ciou);
        let m = t.scale(m, -1.0);
        box_ = Some(t.add_scalar(m, 1.0));

        let ciou_values = t.value(ciou).data().to_vec();
        for (i, e) in st.entries.iter().enumerate() {
            if st.owns_cell(i) {
                obj_target[cell_of(e)] = ciou_values[i].max(F::zero());
            }
        }

        if nc > 0 {
            let idx: Vec<usize> = bases.iter().flat_map(|b| (0..nc).map(move |c| b + 5 + c)).collect();
            let logits = t.gather(pred, Arc::new(idx), &[n, nc]);
            let one_hot: Vec<F> = st
                .entries
                .iter()
                .flat_map(|e| (0..nc).map(move |c| if c == e.class_id as usize { F::one() } else { F::zero() }))
                .collect();
            cls = Some(t.bce_with_logits(logits, one_hot));
        }
    }
    let obj_idx: Vec<usize> = (0..cells).map(|c| c * no + 4).collect();
    let obj_logits = t.gather(pred, Arc::new(obj_idx), &[cells]);
    let obj = t.bce_with_logits(obj_logits, obj_target);
    Ok(ScaleLoss { box_, obj, cls })
}

/// Composite detection loss over raw head outputs `[B, A, G, G, 5 + nc]`:
/// `λ_box·Σ_s mean(1 − CIoU) + λ_obj·Σ_s balance_s·BCE(obj) + λ_cls·Σ_s BCE(cls)`.
pub fn total_loss<F: Element>(
    t: &mut Tape<F>,
    preds: &[Var],
    targets: &AssignedTargets,
    cfg: &ModelConfig,
    w: &LossWeights,
) -> Result<Loss> {
    if preds.len() != targets.scales.len() {
        return Err(Error::Shape(format!("{} prediction scales but {} target scales", preds.len(), targets.scales.len())));
    }
    let (mut box_, mut obj, mut cls) = (None, None, None);
    for (si, (&pred, st)) in preds.iter().zip(&targets.scales).enumerate() {
        let s = scale_loss(t, pred, st, targets.batch, cfg.num_classes)?;
        if let Some(b) = s.box_ {
            box_ = sum_opt(t, box_, b);
        }
        if let Some(c) = s.cls {
            cls = sum_opt(t, cls, c);
        }
        let o = t.scale(s.obj, w.obj_balance[si]);
        obj = sum_opt(t, obj, o);
    }
    let zero = |t: &mut Tape<F>| t.constant(Tensor::scalar(F::zero()));
    let box_ = box_.unwrap_or_else(|| zero(t));
    let cls = cls.unwrap_or_else(|| zero(t));
    let obj = obj.unwrap_or_else(|| zero(t));
    let box_ = t.scale(box_, w.box_);
    let obj = t.scale(obj, w.obj);
    let cls = t.scale(cls, w.cls);
    let components = LossComponents { box_: scalar(t, box_), obj: scalar(t, obj), cls: scalar(t, cls), total: 0.0 };
    for (name, v) in [("box", components.box_), ("obj", components.obj), ("cls", components.cls)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name });
        }
    }
    let total = t.add(box_, obj);
    let total = t.add(total, cls);
    Ok(Loss { total, components: LossComponents { total: scalar(t, total), ..components } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ciou, BBox};
    use crate::model::STRIDES;
    use crate::train::targets::assign_targets;

    fn zero_preds(t: &mut Tape<f64>, cfg: &ModelConfig, batch: usize, fill: f64) -> Vec<Var> {
        STRIDES
            .iter()
            .map(|&s| {
                let g = cfg.input_size / s;
                t.variable(Tensor::full(&[batch, NUM_ANCHORS, g, g, cfg.outputs_per_anchor()], fill))
            })
            .collect()
    }

    #[test]
    fn tape_ciou_matches_scalar_ciou() {
        let cases = [(1.0, 2.0, 3.0, 1.5, 1.4, 2.2, 2.0, 2.5), (0.5, 0.5, 1.0, 1.0, 3.0, 3.0, 0.5, 2.0)];
        for (a, b, c, d, e, f, g, h) in cases {
            let mut t = Tape::<f64>::new();
            let mut v = |x: f64| t.constant(Tensor::from_f64(&[1], &[x]).unwrap());
            let p = BoxVars { cx: v(a), cy: v(b), w: v(c), h: v(d) };
            let q = BoxVars { cx: v(e), cy: v(f), w: v(g), h: v(h) };
            let r = ciou_vars(&mut t, p, q);
            let oracle = ciou(&BBox::from_center(a, b, c, d), &BBox::from_center(e, f, g, h));
            assert!((t.value(r).data()[0] - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_targets_leave_only_objectness() {
        let cfg = ModelConfig::tiny().with_input_size(64);
        let mut t = Tape::new();
        let preds = zero_preds(&mut t, &cfg, 2, 0.0);
        let tg = assign_targets(&[vec![], vec![]], &cfg, 4.0);
        let l = total_loss(&mut t, &preds, &tg, &cfg, &LossWeights::default()).unwrap();
        assert_eq!((l.components.box_, l.components.cls), (0.0, 0.0));
        let expected = (4.0 + 1.0 + 0.4) * std::f64::consts::LN_2;
        assert!((l.components.obj - expected).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_limit() {
        let cfg = ModelConfig::tiny().with_input_size(64);
        let b = BBox::from_center(20.0, 28.0, 12.0, 15.0);
        let tg = assign_targets(&[vec![b]], &cfg, 4.0);
        let mut t = Tape::new();
        let preds = zero_preds(&mut t, &cfg, 1, -40.0);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut values: Vec<Tensor<f64>> = preds.iter().map(|&p| t.value(p).clone()).collect();
        let no = cfg.outputs_per_anchor();
        for (si, st) in tg.scales.iter().enumerate() {
            for e in &st.entries {
                let base = ((e.anchor * st.grid + e.grid_y) * st.grid + e.grid_x) * no;
                let d = values[si].data_mut();
                d[base] = logit((e.offset[0] + 0.5) / 2.0);
                d[base + 1] = logit((e.offset[1] + 0.5) / 2.0);
                d[base + 2] = logit((e.size[0] / e.anchor_size[0]).sqrt() / 2.0);
                d[base + 3] = logit((e.size[1] / e.anchor_size[1]).sqrt() / 2.0);
                d[base + 4] = 40.0;
                d[base + 5] = 40.0;
            }
        }
        let mut t = Tape::new();
        let preds: Vec<Var> = values.into_iter().map(|v| t.variable(v)).collect();
        let l = total_loss(&mut t, &preds, &tg, &cfg, &LossWeights::default()).unwrap();
        assert!(l.components.box_ < 1e-6, "{:?}", l.components);
        assert!(l.components.cls < 1e-12, "{:?}", l.components);
    }

    #[test]
    fn box_weight_is_linear() {
        let cfg = ModelConfig::tiny().with_input_size(64);
        let tg = assign_targets(&[vec![BBox::from_center(30.0, 30.0, 14.0, 10.0)]], &cfg, 4.0);
        let run = |w: LossWeights| {
            let mut t = Tape::new();
            let preds = zero_preds(&mut t, &cfg, 1, 0.1);
            total_loss(&mut t, &preds, &tg, &cfg, &w).unwrap().components
        };
        let base = run(LossWeights::default());
        let doubled = run(LossWeights { box_: 0.1, ..LossWeights::default() });
        assert_eq!(doubled.box_, 2.0 * base.box_);
        assert_eq!((doubled.obj, doubled.cls), (base.obj, base.cls));
    }

    #[test]
    fn non_finite_prediction_names_component() {
        let cfg = ModelConfig::tiny().with_input_size(64);
        let tg = assign_targets(&[vec![]], &cfg, 4.0);
        let mut t = Tape::new();
        let preds = zero_preds(&mut t, &cfg, 1, f64::NAN);
        match total_loss(&mut t, &preds, &tg, &cfg, &LossWeights::default()) {
            Err(Error::NonFinite { component }) => assert_eq!(component, "obj"),
            other => panic!("expected non-finite error, got {:?}", other.map(|l| l.components)),
        }
    }
}
