//! Per-pixel front-to-back alpha composition of refined layers.

use crate::autodiff::{Tensor, Var};
use crate::{Error, Real, Result};

/// Output of the 2D refiner for one primitive.
#[derive(Debug, Clone, Copy)]
pub struct RefinedLayer<'t> {
    /// `[3, H, W]` colour in [0, 1].
    pub color: Var<'t>,
    pub alpha: Var<'t>,
    pub depth: Var<'t>,
    /// Stable primitive index; breaks depth ties independently of list order.
    pub id: usize,
    pub is_background: bool,
}

pub struct Composite<'t> {
    pub image: Var<'t>,
    /// Effective contribution `A_i Π_{j in front} (1 - A_j)` per input layer, `[H, W]` each.
    pub weights: Vec<Tensor>,
}

/// Per-pixel order of the layers: ascending depth, then primitive id, with
/// the background last.
fn pixel_order(depths: &[&[Real]], ids: &[usize], bg: usize, p: usize, order: &mut Vec<usize>) {
    order.clear();
    order.extend((0..depths.len()).filter(|&i| i != bg));
    order.sort_by(|&a, &b| depths[a][p].total_cmp(&depths[b][p]).then(ids[a].cmp(&ids[b])));
    order.push(bg);
}

/// Composites layers by depth with the over operator.
///
/// Depth only decides the order; it receives no gradient. The background
/// alpha is taken as 1.
pub fn composite<'t>(layers: &[RefinedLayer<'t>]) -> Result<Composite<'t>> {
    let bgs: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].is_background).collect();
    let &[bg] = bgs.as_slice() else {
        return Err(Error::Invalid(format!("composite needs exactly one background layer, got {}", bgs.len())));
    };
    let shape = layers[bg].color.shape();
    let &[3, h, w] = shape.as_slice() else {
        return Err(Error::Shape(format!("layer colour must be [3,H,W], got {:?}", shape)));
    };
    for l in layers {
        if l.color.shape() != shape || l.alpha.shape() != [h, w] || l.depth.shape() != [h, w] {
            return Err(Error::Shape("all layers must share one image size".into()));
        }
    }
    let n = h * w;
    let colors: Vec<_> = layers.iter().map(|l| l.color.value()).collect();
    let alphas: Vec<_> = layers.iter().map(|l| l.alpha.value()).collect();
    let depths: Vec<_> = layers.iter().map(|l| l.depth.value()).collect();
    let depth_refs: Vec<&[Real]> = depths.iter().map(|d| d.data()).collect();
    let ids: Vec<usize> = layers.iter().map(|l| l.id).collect();
    let alpha_of = move |alphas: &[std::rc::Rc<Tensor>], i: usize, p: usize| if i == bg { 1.0 } else { alphas[i].data()[p] };

    let mut orders = Vec::with_capacity(n);
    let mut image = vec![0.0; 3 * n];
    let mut weights = vec![vec![0.0; n]; layers.len()];
    let mut order = Vec::new();
    for p in 0..n {
        pixel_order(&depth_refs, &ids, bg, p, &mut order);
        let mut transmit = 1.0;
        for &i in &order {
            let a = alpha_of(&alphas, i, p);
            let wgt = a * transmit;
            weights[i][p] = wgt;
            for c in 0..3 {
                image[c * n + p] += wgt * colors[i].data()[c * n + p];
            }
            transmit *= 1.0 - a;
        }
        orders.push(order.iter().map(|&i| i as u8).collect::<Vec<u8>>());
    }

    let mut parents = Vec::with_capacity(2 * layers.len());
    for l in layers {
        parents.push(l.color);
        parents.push(l.alpha);
    }
    let count = layers.len();
    let out = layers[0].color.tape().record(Tensor::from_parts(vec![3, h, w], image), &parents, move |g| {
        let gd = g.data();
        let mut gc = vec![vec![0.0; 3 * n]; count];
        let mut ga = vec![vec![0.0; n]; count];
        for (p, order) in orders.iter().enumerate() {
            // colour composited from the layers after the current one
            let mut behind = [0.0; 3];
            let mut trans = Vec::with_capacity(order.len());
            let mut t = 1.0;
            for &i in order {
                trans.push(t);
                t *= 1.0 - alpha_of(&alphas, i as usize, p);
            }
            for (slot, &i) in order.iter().enumerate().rev() {
                let i = i as usize;
                let a = alpha_of(&alphas, i, p);
                let tr = trans[slot];
                let mut ga_p = 0.0;
                for c in 0..3 {
                    let x = colors[i].data()[c * n + p];
                    gc[i][c * n + p] = gd[c * n + p] * a * tr;
                    ga_p += gd[c * n + p] * tr * (x - behind[c]);
                    behind[c] = a * x + (1.0 - a) * behind[c];
                }
                if i != bg {
                    ga[i][p] = ga_p;
                }
            }
        }
        let mut grads = Vec::with_capacity(2 * count);
        for (c, a) in gc.into_iter().zip(ga) {
            grads.push(Some(Tensor::from_parts(vec![3, h, w], c)));
            grads.push(Some(Tensor::from_parts(vec![h, w], a)));
        }
        grads
    });
    Ok(Composite {
        image: out,
        weights: weights.into_iter().map(|v| Tensor::from_parts(vec![h, w], v)).collect(),
    })
}

/// Whether compositing the layers in `permutation` order gives a bitwise
/// identical image. The background keeps its flag under any permutation.
pub fn composite_permutation_check(layers: &[RefinedLayer<'_>], permutation: &[usize]) -> Result<bool> {
    if permutation.len() != layers.len() {
        return Err(Error::Invalid("permutation length differs from layer count".into()));
    }
    let mut seen = vec![false; layers.len()];
    for &i in permutation {
        if i >= layers.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!("{:?} is not a permutation", permutation)));
        }
    }
    let permuted: Vec<RefinedLayer> = permutation.iter().map(|&i| layers[i]).collect();
    let a = composite(layers)?.image.value();
    let b = composite(&permuted)?.image.value();
    Ok(a.data() == b.data())
}
