//! Plain scalar re-derivations of the transfer losses, written without
//! touching the library's helpers. Every loop is explicit so a bug in the
//! vectorized code cannot be mirrored here.

pub const EPS: f64 = 1e-12;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut hi = f64::NEG_INFINITY;
    for &v in z {
        if v > hi {
            hi = v;
        }
    }
    let mut e = Vec::with_capacity(z.len());
    let mut total = 0.0;
    for &v in z {
        let x = (v - hi).exp();
        e.push(x);
        total += x;
    }
    for x in e.iter_mut() {
        *x /= total;
    }
    e
}

pub fn kl(ps: &[f64], pt: &[f64]) -> f64 {
    let mut acc = 0.0;
    for c in 0..ps.len() {
        let a = if ps[c] < EPS { EPS } else { ps[c] };
        let b = if pt[c] < EPS { EPS } else { pt[c] };
        acc += ps[c] * (a.ln() - b.ln());
    }
    acc
}

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x * x;
    }
    let n = s.sqrt();
    if n < EPS {
        EPS
    } else {
        n
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] / na) * (b[i] / nb);
    }
    s
}

pub fn sq_dist_normalized(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] / na - b[i] / nb;
        s += d * d;
    }
    s
}

/// First row-major maximum of an `h × w` map.
pub fn peak(map: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut br, mut bc) = (0, 0);
    for r in 0..h {
        for c in 0..w {
            if map[r * w + c] > map[br * w + bc] {
                br = r;
                bc = c;
            }
        }
    }
    (br, bc)
}

/// Top-left corner of a `k × k` window centered on `(r, c)`, pushed back
/// inside the map when it would overhang an edge.
pub fn window(r: usize, c: usize, k: usize, h: usize, w: usize) -> (usize, usize) {
    let half = (k / 2) as isize;
    let clamp = |p: usize, side: usize| -> usize {
        let start = p as isize - half;
        let hi = (side - k) as isize;
        start.max(0).min(hi) as usize
    };
    (clamp(r, h), clamp(c, w))
}

pub fn crop(map: &[f64], w: usize, top: usize, left: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * k);
    for r in top..top + k {
        for c in left..left + k {
            out.push(map[r * w + c]);
        }
    }
    out
}

/// Crop pairs of one sample, cut where the source map peaks.
pub fn crops(qs: &[f64], qt: &[f64], h: usize, w: usize, sizes: &[usize]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let (r, c) = peak(qs, h, w);
    let mut out = Vec::new();
    for &k in sizes {
        let (top, left) = window(r, c, k, h, w);
        out.push((crop(qs, w, top, left, k), crop(qt, w, top, left, k)));
    }
    out
}

pub fn attn_mse(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut s = 0.0;
    for (a, b) in pairs {
        s += sq_dist_normalized(a, b);
    }
    s / pairs.len() as f64
}

pub fn attn_cos(pairs: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let mut s = 0.0;
    for (a, b) in pairs {
        s += cosine(a, b);
    }
    s / pairs.len() as f64
}

/// One sample of one node: raw logits and an attention map.
#[derive(Clone, Debug)]
pub struct Sample {
    pub logits: Vec<f64>,
    pub map: Vec<f64>,
}

/// Per-sample loss of a design, named by its variant name so this file
/// stays independent of the library's enum.
pub fn design(name: &str, s: &Sample, t: &Sample, h: usize, w: usize, sizes: &[usize]) -> f64 {
    let (ps, pt) = (softmax(&s.logits), softmax(&t.logits));
    let pairs = || crops(&s.map, &t.map, h, w, sizes);
    match name {
        "ProbCloser" => kl(&ps, &pt),
        "ProbApart" => cosine(&ps, &pt),
        "AttnCloser" => attn_mse(&pairs()),
        "AttnApart" => attn_cos(&pairs()),
        "BothCloser" => kl(&ps, &pt) + attn_mse(&pairs()),
        "BothApart" => cosine(&ps, &pt) + attn_cos(&pairs()),
        other => panic!("unknown design {other}"),
    }
}

pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    -softmax(z)[label].ln()
}
