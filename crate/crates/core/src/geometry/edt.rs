/// Squared distance transform of a sampled function along one line
/// (lower envelope of parabolas), with sample spacing `w`.
fn edt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q as f64 * w).powi(2);
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let fp = f[p] + (p as f64 * w).powi(2);
            let s = (fq - fp) / (2.0 * w * (q as f64 - p as f64) * w) * w;
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let x = q as f64 * w;
        while z[j + 1] < x {
            j += 1;
        }
        let p = v[j];
        *o = (x - p as f64 * w).powi(2) + f[p];
    }
}

/// Euclidean distance (in physical units) from every `true` voxel to the
/// nearest `false` voxel, treating everything outside the grid as `false`.
/// Background voxels get 0.
pub fn distance_to_boundary(mask: &[bool], dims: [usize; 3], voxel_size: [f64; 3]) -> Vec<f64> {
    // pad by one background voxel on every side
    let pd = [dims[0] + 2, dims[1] + 2, dims[2] + 2];
    let mut g = vec![0.0f64; pd[0] * pd[1] * pd[2]];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mask[(z * dims[1] + y) * dims[0] + x] {
                    g[((z + 1) * pd[1] + y + 1) * pd[0] + x + 1] = f64::INFINITY;
                }
            }
        }
    }
    let strides = [1, pd[0], pd[0] * pd[1]];
    for axis in 0..3 {
        let n = pd[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..pd[others[1]] {
            for j in 0..pd[others[0]] {
                let base = i * strides[others[1]] + j * strides[others[0]];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = g[base + k * strides[axis]];
                }
                edt_1d(&line, voxel_size[axis], &mut out);
                for (k, o) in out.iter().enumerate() {
                    g[base + k * strides[axis]] = *o;
                }
            }
        }
    }
    let mut res = vec![0.0; mask.len()];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                res[(z * dims[1] + y) * dims[0] + x] = g[((z + 1) * pd[1] + y + 1) * pd[0] + x + 1].sqrt();
            }
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(mask: &[bool], dims: [usize; 3], w: [f64; 3]) -> Vec<f64> {
        let mut bg = Vec::new();
        for z in -1..=dims[2] as i64 {
            for y in -1..=dims[1] as i64 {
                for x in -1..=dims[0] as i64 {
                    let inside = x >= 0 && y >= 0 && z >= 0 && (x as usize) < dims[0] && (y as usize) < dims[1] && (z as usize) < dims[2];
                    if !inside || !mask[(z as usize * dims[1] + y as usize) * dims[0] + x as usize] {
                        bg.push([x, y, z]);
                    }
                }
            }
        }
        (0..mask.len())
            .map(|i| {
                if !mask[i] {
                    return 0.0;
                }
                let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
                bg.iter()
                    .map(|b| (0..3).map(|a| ((p[a] as i64 - b[a]) as f64 * w[a]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_brute_force(bits in proptest::collection::vec(proptest::bool::weighted(0.8), 6 * 5 * 4), wz in 1.0f64..5.0) {
            let dims = [6, 5, 4];
            let w = [1.0, 1.5, wz];
            let fast = distance_to_boundary(&bits, dims, w);
            let slow = brute(&bits, dims, w);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_voxel_is_one_step_from_background() {
        let d = distance_to_boundary(&[true], [1, 1, 1], [4.0, 6.0, 40.0]);
        assert_eq!(d, vec![4.0]);
    }
}
