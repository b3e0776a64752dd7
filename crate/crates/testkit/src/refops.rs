//! f64 forward definitions of the network ops, written from their formulas.
//!
//! Layouts match the engine: NCHW for images, (N, D) for vectors.

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Arr { shape: shape.to_vec(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Arr { shape: vec![], data: vec![v] }
    }

    fn d4(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, ch, h, w) = self.d4();
        self.data[((n * ch + c) * h + y) * w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

pub fn conv2d(x: &Arr, w: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let (n, cin, h, wd) = x.d4();
    let (cout, _, k, _) = w.d4();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * cout * ho * wo);
    for bi in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data[o]);
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at(bi, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    Arr::new(&[n, cout, ho, wo], out)
}

/// `x (N, in)`, `w (out, in)`.
pub fn linear(x: &Arr, w: &Arr, b: Option<&Arr>) -> Arr {
    let (n, fin) = (x.shape[0], x.shape[1]);
    let fout = w.shape[0];
    let mut out = Vec::with_capacity(n * fout);
    for r in 0..n {
        for o in 0..fout {
            let mut s = b.map_or(0.0, |b| b.data[o]);
            for i in 0..fin {
                s += x.data[r * fin + i] * w.data[o * fin + i];
            }
            out.push(s);
        }
    }
    Arr::new(&[n, fout], out)
}

pub fn relu(x: &Arr) -> Arr {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn prelu(x: &Arr) -> Arr {
    x.map(|v| if v >= 0.0 { v } else { 0.2 * v })
}

pub fn sigmoid(x: &Arr) -> Arr {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn softplus(x: &Arr) -> Arr {
    x.map(|v| (1.0 + v.exp()).ln())
}

pub fn max_pool2(x: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h / 2 {
                for xx in 0..w / 2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(b, ch, 2 * y + dy, 2 * xx + dx))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out.push(m);
                }
            }
        }
    }
    Arr::new(&[n, c, h / 2, w / 2], out)
}

pub fn upsample2(x: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x.at(b, ch, y / 2, xx / 2));
                }
            }
        }
    }
    Arr::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn global_avg_pool(x: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x.at(b, ch, y, xx);
                }
            }
            out.push(s / (h * w) as f64);
        }
    }
    Arr::new(&[n, c], out)
}

/// `x (N, C, H, W)` times `s (N, C)` per channel.
pub fn scale_channels(x: &Arr, s: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                out.data[(b * c + ch) * h * w + i] *= s.data[b * c + ch];
            }
        }
    }
    out
}

pub fn add_spatial(x: &Arr, v: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                out.data[(b * c + ch) * h * w + i] += v.data[b * c + ch];
            }
        }
    }
    out
}

pub fn channel_attention(x: &Arr, w1: &Arr, b1: &Arr, w2: &Arr, b2: &Arr) -> Arr {
    let g = global_avg_pool(x);
    let s = sigmoid(&linear(&relu(&linear(&g, w1, Some(b1))), w2, Some(b2)));
    scale_channels(x, &s)
}

pub fn mul(a: &Arr, b: &Arr) -> Arr {
    Arr { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect() }
}

pub fn concat(a: &Arr, b: &Arr) -> Arr {
    let (n, ca, h, w) = a.d4();
    let cb = b.shape[1];
    let mut out = Vec::new();
    for i in 0..n {
        out.extend_from_slice(&a.data[i * ca * h * w..(i + 1) * ca * h * w]);
        out.extend_from_slice(&b.data[i * cb * h * w..(i + 1) * cb * h * w]);
    }
    Arr::new(&[n, ca + cb, h, w], out)
}

pub fn channel(x: &Arr, c: usize) -> Arr {
    let (n, ch, h, w) = x.d4();
    let mut out = Vec::new();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                out.push(x.at(b, c, y, xx));
            }
        }
    }
    let _ = ch;
    Arr::new(&[n, 1, h, w], out)
}

/// Triangular-kernel histogram with centers `(k + 0.5) / 256`, inputs clamped
/// to the outer centers; one row per sample.
pub fn soft_histogram(x: &Arr) -> Arr {
    let n = x.shape[0];
    let per = x.data.len() / n;
    let (c0, c255) = (0.5 / 256.0, 255.5 / 256.0);
    let mut out = vec![0.0; n * 256];
    for b in 0..n {
        for &v in &x.data[b * per..(b + 1) * per] {
            let v = v.clamp(c0, c255);
            for k in 0..256 {
                let ck = (k as f64 + 0.5) / 256.0;
                out[b * 256 + k] += (1.0 - (v - ck).abs() * 256.0).max(0.0) / per as f64;
            }
        }
    }
    Arr::new(&[n, 256], out)
}

/// Mean angle in degrees between rows.
pub fn angular(p: &Arr, t: &Arr) -> Arr {
    let (n, d) = (p.shape[0], p.shape[1]);
    let mut total = 0.0;
    for r in 0..n {
        let a = &p.data[r * d..(r + 1) * d];
        let b = &t.data[r * d..(r + 1) * d];
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        total += (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees();
    }
    Arr::scalar(total / n as f64)
}

pub fn l1(a: &Arr, b: &Arr) -> Arr {
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Arr::scalar(s / a.data.len() as f64)
}

pub fn hist_loss(a: &Arr, b: &Arr) -> Arr {
    let (ha, hb) = (soft_histogram(a), soft_histogram(b));
    let s: f64 = ha.data.iter().zip(&hb.data).map(|(x, y)| (x - y).abs()).sum();
    Arr::scalar(s / a.shape[0] as f64)
}

pub fn white_balance(x: &Arr, illum: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let k = illum.data[b * 3 + 1] / illum.data[b * 3 + ch];
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out.data[idx] = (x.data[idx] * k).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn color_matrix(x: &Arr, ms: &[[[f64; 3]; 3]]) -> Arr {
    let (n, _, h, w) = x.d4();
    let mut out = x.clone();
    for (b, m) in ms.iter().enumerate().take(n) {
        for y in 0..h {
            for xx in 0..w {
                let v = [x.at(b, 0, y, xx), x.at(b, 1, y, xx), x.at(b, 2, y, xx)];
                for r in 0..3 {
                    let o = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
                    out.data[((b * 3 + r) * h + y) * w + xx] = o.max(0.0);
                }
            }
        }
    }
    out
}

pub fn recolorize(x: &Arr, luma: usize, pred: &Arr) -> Arr {
    let (n, c, h, w) = x.d4();
    let mut out = x.clone();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let ratio = pred.at(b, 0, y, xx) / (x.at(b, luma, y, xx) + 1e-6);
                for ch in 0..c {
                    out.data[((b * c + ch) * h + y) * w + xx] *= ratio;
                }
            }
        }
    }
    out
}

pub fn l2_normalize(x: &Arr) -> Arr {
    let (n, d) = (x.shape[0], x.shape[1]);
    let mut out = x.clone();
    for r in 0..n {
        let norm = x.data[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut out.data[r * d..(r + 1) * d] {
            *v /= norm;
        }
    }
    out
}

pub fn srgb_encode(x: &Arr) -> Arr {
    x.map(|v| {
        let v = v.clamp(0.0, 1.0);
        if v <= 0.0031308 {
            12.92 * v
        } else {
            1.055 * v.powf(1.0 / 2.4) - 0.055
        }
    })
}
