// Raw slice kernels. Every output row of a product depends only on the
// matching input row, so batching rows never changes the bits of a result.

/// `out[m×p] = a[m×k] · b[k×p]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    // Four output rows share each pass over `b`. Every element still sums
    // over `kk` in order, so a row's value never depends on how many rows
    // are multiplied together.
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * p..(i + 4) * p].split_at_mut(p);
        let (r1, rest) = rest.split_at_mut(p);
        let (r2, r3) = rest.split_at_mut(p);
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let (a0, a1, a2, a3) = (a[i * k + kk], a[(i + 1) * k + kk], a[(i + 2) * k + kk], a[(i + 3) * k + kk]);
            for j in 0..p {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            axpy(row, av, &b[kk * p..(kk + 1) * p]);
        }
    }
    out
}

/// `out[k×p] += a[m×k]ᵀ · g[m×p]`
pub(crate) fn matmul_at_b_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            axpy(&mut out[kk * p..(kk + 1) * p], av, grow);
        }
    }
}

/// `out[m×k] += g[m×p] · b[k×p]ᵀ`
pub(crate) fn matmul_a_bt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            out[i * k + kk] += dot(grow, &b[kk * p..(kk + 1) * p]);
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Four-lane dot product; fixed association order keeps it deterministic.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Max-subtracted softmax of `x / temperature`, written in place.
pub fn softmax_slice(x: &mut [f64], temperature: f64) {
    let inv_t = 1.0 / temperature;
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = ((*v - max) * inv_t).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax with unit temperature, written in place.
pub fn log_softmax_slice(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in x.iter_mut() {
        *v -= lse;
    }
}
