use crate::volume::Volume;

/// Mask voxels with at least one face neighbour outside the mask; voxels on
/// the image border count as boundary.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [nz, ny, nx] = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !mask[i] {
                    continue;
                }
                let at_border = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                out[i] = at_border
                    || !mask[i - ny * nx]
                    || !mask[i + ny * nx]
                    || !mask[i - nx]
                    || !mask[i + nx]
                    || !mask[i - 1]
                    || !mask[i + 1];
            }
        }
    }
    out
}

/// Boundary voxel coordinates scaled to mm.
pub fn surface_points(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let [_, ny, nx] = dims;
    boundary(mask, dims)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            [
                (i / (ny * nx)) as f64 * spacing[0],
                ((i / nx) % ny) as f64 * spacing[1],
                (i % nx) as f64 * spacing[2],
            ]
        })
        .collect()
}

/// Squared distance transform of one line: `out[q] = min_p (s (q - p))^2 + f[p]`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zb: &mut Vec<f64>) {
    v.clear();
    zb.clear();
    let pos = |p: usize| p as f64 * s;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let inter = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                    if inter <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(inter);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zb[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        let d = pos(q) - pos(p);
        *o = d * d + f[p];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// `seed` voxel, by separable lower envelopes of parabolas.
pub fn squared_edt(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut zb) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for k in 0..n {
                    line[k] = d[base + k * strides[axis]];
                }
                edt_line(&line, spacing[axis], &mut out, &mut v, &mut zb);
                for k in 0..n {
                    d[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    d
}

pub fn class_mask(labels: &Volume, class: u8) -> Vec<bool> {
    labels
        .label_values()
        .map(|v| v.iter().map(|&l| l == class).collect())
        .unwrap_or_default()
}
