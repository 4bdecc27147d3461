//! Plain-slice numeric kernels shared by the tape and the tape-free
//! inference path, so both produce bit-identical results.

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `x[m×inp] · wᵀ + b` with `w` stored `out×inp`.
pub(crate) fn linear(x: &[f64], m: usize, inp: usize, w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * out];
    for r in 0..m {
        let xr = &x[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            y[r * out + o] = acc + b[o];
        }
    }
    y
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
