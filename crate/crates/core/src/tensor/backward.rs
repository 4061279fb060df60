//! Reverse pass over the tape: visits nodes in exact reverse execution
//! order and accumulates gradients into their inputs.

use super::{Graph, Op};
use crate::error::Result;

pub(crate) fn run(graph: &Graph, loss_id: usize) -> Result<()> {
    let mut inner = graph.inner.borrow_mut();
    if inner.consumed {
        return Err(crate::error::Error::GraphConsumed);
    }
    inner.consumed = true;

    let n = inner.nodes.len();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    grads[loss_id] = Some(vec![1.0]);

    for id in (0..=loss_id).rev() {
        let Some(gout) = grads[id].take() else {
            continue;
        };
        // Leaves keep their gradient; interior nodes only relay it.
        if matches!(inner.nodes[id].op, Op::Leaf) {
            if inner.nodes[id].requires_grad {
                inner.nodes[id].grad = Some(gout);
            }
            continue;
        }
        if !inner.nodes[id].requires_grad {
            continue;
        }

        let op = inner.nodes[id].op.clone();
        let add_to = |idx: usize,
                          grads: &mut Vec<Option<Vec<f64>>>,
                          nodes: &[super::Node],
                          contrib: &[f64]| {
            if !nodes[idx].requires_grad {
                return;
            }
            let slot = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.len()]);
            for (s, &c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };

        match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                add_to(a, &mut grads, &inner.nodes, &gout);
                add_to(b, &mut grads, &inner.nodes, &gout);
            }
            Op::Sub(a, b) => {
                add_to(a, &mut grads, &inner.nodes, &gout);
                let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                add_to(b, &mut grads, &inner.nodes, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gout
                    .iter()
                    .zip(&inner.nodes[b].value)
                    .map(|(g, v)| g * v)
                    .collect();
                let gb: Vec<f64> = gout
                    .iter()
                    .zip(&inner.nodes[a].value)
                    .map(|(g, v)| g * v)
                    .collect();
                add_to(a, &mut grads, &inner.nodes, &ga);
                add_to(b, &mut grads, &inner.nodes, &gb);
            }
            Op::Div(a, b) => {
                let bv = &inner.nodes[b].value;
                let av = &inner.nodes[a].value;
                let ga: Vec<f64> = gout.iter().zip(bv).map(|(g, v)| g / v).collect();
                let gb: Vec<f64> = gout
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                add_to(a, &mut grads, &inner.nodes, &ga);
                add_to(b, &mut grads, &inner.nodes, &gb);
            }
            Op::Neg(x) => {
                let g: Vec<f64> = gout.iter().map(|g| -g).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Exp(x) => {
                let out = &inner.nodes[id].value;
                let g: Vec<f64> = gout.iter().zip(out).map(|(g, y)| g * y).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Ln(x) => {
                let xv = &inner.nodes[x].value;
                let g: Vec<f64> = gout.iter().zip(xv).map(|(g, v)| g / v).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Sqrt(x) => {
                let out = &inner.nodes[id].value;
                let g: Vec<f64> = gout.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Sigmoid(x) => {
                let out = &inner.nodes[id].value;
                let g: Vec<f64> = gout
                    .iter()
                    .zip(out)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Tanh(x) => {
                let out = &inner.nodes[id].value;
                let g: Vec<f64> = gout.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Sin(x) => {
                let xv = &inner.nodes[x].value;
                let g: Vec<f64> = gout.iter().zip(xv).map(|(g, v)| g * v.cos()).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Cos(x) => {
                let xv = &inner.nodes[x].value;
                let g: Vec<f64> = gout.iter().zip(xv).map(|(g, v)| -g * v.sin()).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::AddScalar(x) => add_to(x, &mut grads, &inner.nodes, &gout),
            Op::MulScalar(x, c) => {
                let g: Vec<f64> = gout.iter().map(|g| g * c).collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &inner.nodes[x].value;
                let g: Vec<f64> = gout
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                    .collect();
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::ScaleBy { x, s } => {
                let sv = inner.nodes[s].value[0];
                let gx: Vec<f64> = gout.iter().map(|g| g * sv).collect();
                let gs: f64 = gout
                    .iter()
                    .zip(&inner.nodes[x].value)
                    .map(|(g, v)| g * v)
                    .sum();
                add_to(x, &mut grads, &inner.nodes, &gx);
                add_to(s, &mut grads, &inner.nodes, &[gs]);
            }
            Op::OffsetBy { x, s } => {
                add_to(x, &mut grads, &inner.nodes, &gout);
                let gs: f64 = gout.iter().sum();
                add_to(s, &mut grads, &inner.nodes, &[gs]);
            }
            Op::Matmul { a, b, m, k, n: nn } => {
                // dA = G * B^T ; dB = A^T * G
                let av = &inner.nodes[a].value;
                let bv = &inner.nodes[b].value;
                if inner.nodes[a].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            let grow = &gout[i * nn..(i + 1) * nn];
                            let brow = &bv[p * nn..(p + 1) * nn];
                            for (g, b) in grow.iter().zip(brow) {
                                acc += g * b;
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    add_to(a, &mut grads, &inner.nodes, &ga);
                }
                if inner.nodes[b].requires_grad {
                    let mut gb = vec![0.0; k * nn];
                    for i in 0..m {
                        let grow = &gout[i * nn..(i + 1) * nn];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            let brow = &mut gb[p * nn..(p + 1) * nn];
                            for (gbv, g) in brow.iter_mut().zip(grow) {
                                *gbv += av_ip * g;
                            }
                        }
                    }
                    add_to(b, &mut grads, &inner.nodes, &gb);
                }
            }
            Op::Transpose2 { x, rows, cols } => {
                let mut g = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        g[i * cols + j] = gout[j * rows + i];
                    }
                }
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Softmax { x, axis } => {
                // dx_j = y_j * (g_j - sum_i g_i y_i) per lane.
                let shape = inner.nodes[id].shape.clone();
                let y = &inner.nodes[id].value;
                let axis_len = shape[axis];
                let lane: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let mut g = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..lane {
                        let idx = |j: usize| o * axis_len * lane + j * lane + i;
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            dot += gout[idx(j)] * y[idx(j)];
                        }
                        for j in 0..axis_len {
                            g[idx(j)] = y[idx(j)] * (gout[idx(j)] - dot);
                        }
                    }
                }
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Sum(x) => {
                let g = vec![gout[0]; inner.nodes[x].value.len()];
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Mean(x) => {
                let n = inner.nodes[x].value.len();
                let g = vec![gout[0] / n as f64; n];
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::MaxReduce { x, argmax } => {
                let mut g = vec![0.0; inner.nodes[x].value.len()];
                g[argmax] = gout[0];
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::Reshape(x) => add_to(x, &mut grads, &inner.nodes, &gout),
            Op::Concat0(ref xs) => {
                let mut offset = 0;
                for &xid in xs {
                    let n = inner.nodes[xid].value.len();
                    let part = gout[offset..offset + n].to_vec();
                    add_to(xid, &mut grads, &inner.nodes, &part);
                    offset += n;
                }
            }
            Op::ChannelAffine { x, scale, offset } => {
                let c = inner.nodes[scale].value.len();
                let hw = inner.nodes[x].value.len() / c;
                let sv = inner.nodes[scale].value.clone();
                let xv = &inner.nodes[x].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gs = vec![0.0; c];
                let mut go = vec![0.0; c];
                for ch in 0..c {
                    for i in 0..hw {
                        let g = gout[ch * hw + i];
                        gx[ch * hw + i] = g * sv[ch];
                        gs[ch] += g * xv[ch * hw + i];
                        go[ch] += g;
                    }
                }
                add_to(x, &mut grads, &inner.nodes, &gx);
                add_to(scale, &mut grads, &inner.nodes, &gs);
                add_to(offset, &mut grads, &inner.nodes, &go);
            }
            Op::Conv2d { x, w, stride, pad } => {
                let [ci, h, ww] = inner.nodes[x].shape[..] else {
                    unreachable!()
                };
                let [co, _, k, _] = inner.nodes[w].shape[..] else {
                    unreachable!()
                };
                let [_, oh, ow] = inner.nodes[id].shape[..] else {
                    unreachable!()
                };
                let xv = &inner.nodes[x].value;
                let wv = &inner.nodes[w].value;
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let need_x = inner.nodes[x].requires_grad;
                let need_w = inner.nodes[w].requires_grad;
                for oc in 0..co {
                    for ic in 0..ci {
                        let kbase = oc * ci * k * k + ic * k * k;
                        for ky in 0..k {
                            for kx in 0..k {
                                let wt = wv[kbase + ky * k + kx];
                                let mut gw_acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as i64 - pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    let iy = iy as usize;
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx) as i64 - pad as i64;
                                        if ix < 0 || ix >= ww as i64 {
                                            continue;
                                        }
                                        let ix = ix as usize;
                                        let g = gout[oc * oh * ow + oy * ow + ox];
                                        if need_w {
                                            gw_acc += g * xv[ic * h * ww + iy * ww + ix];
                                        }
                                        if need_x {
                                            gx[ic * h * ww + iy * ww + ix] += g * wt;
                                        }
                                    }
                                }
                                gw[kbase + ky * k + kx] += gw_acc;
                            }
                        }
                    }
                }
                if need_x {
                    add_to(x, &mut grads, &inner.nodes, &gx);
                }
                if need_w {
                    add_to(w, &mut grads, &inner.nodes, &gw);
                }
            }
            Op::AddChannelBias { x, b } => {
                add_to(x, &mut grads, &inner.nodes, &gout);
                let c = inner.nodes[b].value.len();
                let hw = inner.nodes[x].value.len() / c;
                let mut gb = vec![0.0; c];
                for ch in 0..c {
                    gb[ch] = gout[ch * hw..(ch + 1) * hw].iter().sum();
                }
                add_to(b, &mut grads, &inner.nodes, &gb);
            }
            Op::AvgPool2(x) => {
                let [c, h, w] = inner.nodes[x].shape[..] else {
                    unreachable!()
                };
                let (oh, ow) = (h / 2, w / 2);
                let mut g = vec![0.0; inner.nodes[x].value.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * gout[ch * oh * ow + oy * ow + ox];
                            let base = ch * h * w + 2 * oy * w + 2 * ox;
                            g[base] += gv;
                            g[base + 1] += gv;
                            g[base + w] += gv;
                            g[base + w + 1] += gv;
                        }
                    }
                }
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::UpsampleNearest2(x) => {
                let [c, h, w] = inner.nodes[x].shape[..] else {
                    unreachable!()
                };
                let (oh, ow) = (2 * h, 2 * w);
                let mut g = vec![0.0; inner.nodes[x].value.len()];
                for ch in 0..c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            g[ch * h * w + (y / 2) * w + xo / 2] +=
                                gout[ch * oh * ow + y * ow + xo];
                        }
                    }
                }
                add_to(x, &mut grads, &inner.nodes, &g);
            }
            Op::BilinearSample { x, grid } => {
                let [c, h, w] = inner.nodes[x].shape[..] else {
                    unreachable!()
                };
                let [gh, gw, _] = inner.nodes[grid].shape[..] else {
                    unreachable!()
                };
                let xv = &inner.nodes[x].value;
                let gv = &inner.nodes[grid].value;
                let need_x = inner.nodes[x].requires_grad;
                let need_g = inner.nodes[grid].requires_grad;
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; gv.len()];
                for p in 0..gh * gw {
                    let px = 0.5 * ((gv[2 * p] + 1.0) * w as f64 - 1.0);
                    let py = 0.5 * ((gv[2 * p + 1] + 1.0) * h as f64 - 1.0);
                    let x0f = px.floor();
                    let y0f = py.floor();
                    let fx = px - x0f;
                    let fy = py - y0f;
                    let (x0, y0) = (x0f as i64, y0f as i64);
                    let inb = |xx: i64, yy: i64| {
                        xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64
                    };
                    for ch in 0..c {
                        let g = gout[ch * gh * gw + p];
                        if g == 0.0 {
                            continue;
                        }
                        let plane = ch * h * w;
                        let tap = |xx: i64, yy: i64| -> f64 {
                            if inb(xx, yy) {
                                xv[plane + yy as usize * w + xx as usize]
                            } else {
                                0.0
                            }
                        };
                        let (v00, v10, v01, v11) =
                            (tap(x0, y0), tap(x0 + 1, y0), tap(x0, y0 + 1), tap(x0 + 1, y0 + 1));
                        if need_x {
                            let weights = [
                                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                                (x0 + 1, y0, fx * (1.0 - fy)),
                                (x0, y0 + 1, (1.0 - fx) * fy),
                                (x0 + 1, y0 + 1, fx * fy),
                            ];
                            for (xx, yy, wgt) in weights {
                                if inb(xx, yy) {
                                    gx[plane + yy as usize * w + xx as usize] += g * wgt;
                                }
                            }
                        }
                        if need_g {
                            // d(out)/d(px), then chain through px = ((gx+1)*W - 1)/2.
                            let dpx =
                                (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
                            let dpy =
                                (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
                            gg[2 * p] += g * dpx * 0.5 * w as f64;
                            gg[2 * p + 1] += g * dpy * 0.5 * h as f64;
                        }
                    }
                }
                if need_x {
                    add_to(x, &mut grads, &inner.nodes, &gx);
                }
                if need_g {
                    add_to(grid, &mut grads, &inner.nodes, &gg);
                }
            }
            Op::Interleave2 { a, b } => {
                let n = inner.nodes[a].value.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    ga[i] = gout[2 * i];
                    gb[i] = gout[2 * i + 1];
                }
                add_to(a, &mut grads, &inner.nodes, &ga);
                add_to(b, &mut grads, &inner.nodes, &gb);
            }
        }
    }

    // Zero-fill grads for requires_grad leaves the loss never reached.
    for node in inner.nodes.iter_mut() {
        if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
            node.grad = Some(vec![0.0; node.value.len()]);
        }
    }
    Ok(())
}
