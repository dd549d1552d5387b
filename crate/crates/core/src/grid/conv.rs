use super::{Filter, Image};

/// How pixels outside the image are synthesized before filtering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Mirror about the outer pixel edge (`x[-1] = x[0]`).
    #[default]
    Symmetric,
    /// Pixels outside the image are zero.
    Zero,
}

pub const DEFAULT_BOUNDARY: Boundary = Boundary::Symmetric;

impl Boundary {
    /// Maps a (possibly out-of-range) index onto `0..n`, or `None` when the
    /// boundary rule makes the pixel identically zero.
    #[inline]
    pub fn source_index(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        match self {
            Boundary::Zero => (0..n_i).contains(&i).then_some(i as usize),
            Boundary::Symmetric => {
                let period = 2 * n_i;
                let m = i.rem_euclid(period);
                Some(if m < n_i { m } else { period - 1 - m } as usize)
            }
        }
    }
}

/// An image extended by `pad` pixels on every side.
#[derive(Clone, Debug)]
pub struct Padded {
    pad: usize,
    inner_h: usize,
    inner_w: usize,
    width: usize,
    data: Vec<f64>,
}

pub fn pad(image: &Image, pad: usize, boundary: Boundary) -> Padded {
    let (h, w) = image.dims();
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let src = image.as_slice();
    let cols: Vec<Option<usize>> = (0..pw)
        .map(|jj| boundary.source_index(jj as isize - pad as isize, w))
        .collect();
    let mut data = vec![0.0; ph * pw];
    for ii in 0..ph {
        let Some(si) = boundary.source_index(ii as isize - pad as isize, h) else {
            continue;
        };
        let row = &mut data[ii * pw..(ii + 1) * pw];
        let src_row = &src[si * w..(si + 1) * w];
        row[pad..pad + w].copy_from_slice(src_row);
        for (jj, col) in cols.iter().enumerate() {
            if jj < pad || jj >= pad + w {
                row[jj] = col.map_or(0.0, |sj| src_row[sj]);
            }
        }
    }
    Padded {
        pad,
        inner_h: h,
        inner_w: w,
        width: pw,
        data,
    }
}

impl Padded {
    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn inner_dims(&self) -> (usize, usize) {
        (self.inner_h, self.inner_w)
    }

    #[inline]
    fn row(&self, ii: usize) -> &[f64] {
        &self.data[ii * self.width..(ii + 1) * self.width]
    }

    /// `out[i,j] = sum_{a,b} p[a,b] * x[i + h - a, j + h - b]`, cropped to the
    /// original image size. The filter half-width must equal the padding.
    pub fn conv(&self, filter: &Filter) -> Image {
        let mut out = Image::from_vec_unchecked(
            self.inner_h,
            self.inner_w,
            vec![0.0; self.inner_h * self.inner_w],
        );
        self.conv_accumulate(filter, &mut out);
        out
    }

    /// Adds the convolution to `out` instead of allocating.
    pub fn conv_accumulate(&self, filter: &Filter, out: &mut Image) {
        assert_eq!(filter.half(), self.pad, "filter does not match padding");
        assert_eq!(out.dims(), (self.inner_h, self.inner_w));
        let w = self.inner_w;
        let k = filter.size();
        let two_h = 2 * self.pad;
        let out = out.as_mut_slice();
        for i in 0..self.inner_h {
            let out_row = &mut out[i * w..(i + 1) * w];
            for a in 0..k {
                let src_row = self.row(i + two_h - a);
                for b in 0..k {
                    let c = filter.get(a, b);
                    if c == 0.0 {
                        continue;
                    }
                    let off = two_h - b;
                    for (o, &s) in out_row.iter_mut().zip(&src_row[off..off + w]) {
                        *o += c * s;
                    }
                }
            }
        }
    }

    /// Gradient of `<conv(p), g>` with respect to the taps of `p`:
    /// `d[a,b] = sum_{i,j} g[i,j] * x[i + h - a, j + h - b]`.
    pub fn filter_grad(&self, g: &Image, size: usize) -> Filter {
        assert_eq!(size / 2, self.pad, "filter size does not match padding");
        assert_eq!(g.dims(), (self.inner_h, self.inner_w));
        let (h, w) = (self.inner_h, self.inner_w);
        let two_h = 2 * self.pad;
        let gs = g.as_slice();
        let mut taps = vec![0.0; size * size];
        for a in 0..size {
            for b in 0..size {
                let off = two_h - b;
                let mut acc = 0.0;
                for i in 0..h {
                    let src = &self.row(i + two_h - a)[off..off + w];
                    let gr = &gs[i * w..(i + 1) * w];
                    acc += dot(gr, src);
                }
                taps[a * size + b] = acc;
            }
        }
        Filter::from_vec_unchecked(size, taps)
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, ar) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    let br = b.chunks_exact(4).remainder();
    for (x, y) in ac.zip(b.chunks_exact(4)) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Same-size convolution over the padded image; the kernel is flipped.
pub fn conv2_same(image: &Image, filter: &Filter, boundary: Boundary) -> Image {
    pad(image, filter.half(), boundary).conv(filter)
}

/// Exact transpose of `x -> conv2_same(x, filter, boundary)`, including the
/// fold-back of the padding band. With `Boundary::Zero` this coincides with
/// `conv2_same(g, rot180(filter), Zero)`.
pub fn conv2_same_transpose(g: &Image, filter: &Filter, boundary: Boundary) -> Image {
    let (h, w) = g.dims();
    let k = filter.size();
    let pad = filter.half();
    let two_h = 2 * pad;
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    let gs = g.as_slice();
    let mut ext = vec![0.0; ph * pw];
    for i in 0..h {
        let g_row = &gs[i * w..(i + 1) * w];
        for a in 0..k {
            let ii = i + two_h - a;
            let ext_row = &mut ext[ii * pw..(ii + 1) * pw];
            for b in 0..k {
                let c = filter.get(a, b);
                if c == 0.0 {
                    continue;
                }
                let off = two_h - b;
                for (e, &v) in ext_row[off..off + w].iter_mut().zip(g_row) {
                    *e += c * v;
                }
            }
        }
    }
    fold(&ext, h, w, pad, boundary)
}

/// Adjoint of [`pad`]: accumulates every padded pixel back onto its source.
fn fold(ext: &[f64], h: usize, w: usize, pad: usize, boundary: Boundary) -> Image {
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    let mut out = vec![0.0; h * w];
    let cols: Vec<Option<usize>> = (0..pw)
        .map(|jj| boundary.source_index(jj as isize - pad as isize, w))
        .collect();
    for ii in 0..ph {
        let Some(si) = boundary.source_index(ii as isize - pad as isize, h) else {
            continue;
        };
        let ext_row = &ext[ii * pw..(ii + 1) * pw];
        let out_row = &mut out[si * w..(si + 1) * w];
        for (jj, col) in cols.iter().enumerate() {
            if let Some(sj) = col {
                out_row[*sj] += ext_row[jj];
            }
        }
    }
    Image::from_vec_unchecked(h, w, out)
}

/// Convenience wrapper over [`Padded::filter_grad`].
pub fn filter_grad(input: &Image, g: &Image, size: usize, boundary: Boundary) -> Filter {
    pad(input, size / 2, boundary).filter_grad(g, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::rot180;
    use crate::rng::Seeded;
    use rand::Rng;

    fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Image {
        Image::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_filter(k: usize, rng: &mut impl Rng) -> Filter {
        Filter::new(k, (0..k * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition with explicit index arithmetic.
    fn naive_conv(x: &Image, p: &Filter, boundary: Boundary) -> Image {
        let (h, w) = x.dims();
        let half = p.half() as isize;
        Image::from_fn(h, w, |i, j| {
            let mut acc = 0.0;
            for a in 0..p.size() {
                for b in 0..p.size() {
                    let si = i as isize + half - a as isize;
                    let sj = j as isize + half - b as isize;
                    if let (Some(si), Some(sj)) =
                        (boundary.source_index(si, h), boundary.source_index(sj, w))
                    {
                        acc += p.get(a, b) * x.get(si, sj);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn symmetric_index_mirrors_edges() {
        let b = Boundary::Symmetric;
        let got: Vec<usize> = (-3..7).map(|i| b.source_index(i, 4).unwrap()).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(Boundary::Zero.source_index(-1, 4), None);
    }

    #[test]
    fn identity_filter_is_identity() {
        let mut rng = Seeded::new(1).rng();
        let x = random_image(5, 7, &mut rng);
        let one = Filter::new(1, vec![1.0]).unwrap();
        assert_eq!(conv2_same(&x, &one, Boundary::Symmetric), x);
    }

    #[test]
    fn zero_mean_filter_kills_constants_including_border() {
        let x = Image::filled(5, 5, 0.5);
        let p = Filter::new(3, vec![1.0, -2.0, 1.0, 0.5, 0.0, -0.5, -1.0, 2.0, -1.0]).unwrap();
        let y = conv2_same(&x, &p, Boundary::Symmetric);
        assert!(y.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn matches_naive_definition() {
        let mut rng = Seeded::new(2).rng();
        for &boundary in &[Boundary::Symmetric, Boundary::Zero] {
            for &k in &[1, 3, 5, 7] {
                let x = random_image(8, 9, &mut rng);
                let p = random_filter(k, &mut rng);
                let d = conv2_same(&x, &p, boundary).max_abs_diff(&naive_conv(&x, &p, boundary));
                assert!(d < 1e-13, "k={k} {boundary:?} diff {d}");
            }
        }
    }

    #[test]
    fn padding_wider_than_image_still_reflects() {
        let mut rng = Seeded::new(3).rng();
        let x = random_image(2, 3, &mut rng);
        let p = random_filter(7, &mut rng);
        let d = conv2_same(&x, &p, Boundary::Symmetric).max_abs_diff(&naive_conv(
            &x,
            &p,
            Boundary::Symmetric,
        ));
        assert!(d < 1e-13);
    }

    #[test]
    fn rot180_turns_convolution_into_correlation() {
        let mut rng = Seeded::new(4).rng();
        let x = random_image(8, 8, &mut rng);
        let p = random_filter(3, &mut rng);
        let got = conv2_same(&x, &rot180(&p), Boundary::Symmetric);
        let b = Boundary::Symmetric;
        let want = Image::from_fn(8, 8, |i, j| {
            let mut acc = 0.0;
            for a in 0..3 {
                for c in 0..3 {
                    let si = b.source_index(i as isize + a as isize - 1, 8).unwrap();
                    let sj = b.source_index(j as isize + c as isize - 1, 8).unwrap();
                    acc += p.get(a, c) * x.get(si, sj);
                }
            }
            acc
        });
        assert!(got.max_abs_diff(&want) < 1e-13);
    }

    #[test]
    fn transpose_is_exact_adjoint() {
        let mut rng = Seeded::new(5).rng();
        for &boundary in &[Boundary::Symmetric, Boundary::Zero] {
            let x = random_image(9, 7, &mut rng);
            let z = random_image(9, 7, &mut rng);
            let p = random_filter(5, &mut rng);
            let lhs = conv2_same(&x, &p, boundary).dot(&z);
            let rhs = x.dot(&conv2_same_transpose(&z, &p, boundary));
            assert!((lhs - rhs).abs() < 1e-12, "{boundary:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_padded_transpose_is_rot180_convolution() {
        let mut rng = Seeded::new(6).rng();
        let z = random_image(8, 8, &mut rng);
        let p = random_filter(3, &mut rng);
        let a = conv2_same_transpose(&z, &p, Boundary::Zero);
        let b = conv2_same(&z, &rot180(&p), Boundary::Zero);
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn reflective_adjoint_holds_on_interior() {
        // <p*x, z> = <x, rot180(p)*z> when both x and z vanish near the border.
        let mut rng = Seeded::new(7).rng();
        let k = 3;
        let margin = k - 1;
        let n = 12;
        let interior = |rng: &mut rand_chacha::ChaCha8Rng| {
            Image::from_fn(n, n, |i, j| {
                if i < margin || j < margin || i >= n - margin || j >= n - margin {
                    0.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
        };
        let x = interior(&mut rng);
        let z = interior(&mut rng);
        let p = random_filter(k, &mut rng);
        let lhs = conv2_same(&x, &p, Boundary::Symmetric).dot(&z);
        let rhs = x.dot(&conv2_same(&z, &rot180(&p), Boundary::Symmetric));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn filter_grad_matches_linearity() {
        // conv is linear in p, so <conv(x, p), g> = <p, filter_grad(x, g)>.
        let mut rng = Seeded::new(8).rng();
        let x = random_image(7, 10, &mut rng);
        let g = random_image(7, 10, &mut rng);
        let p = random_filter(5, &mut rng);
        let lhs = conv2_same(&x, &p, Boundary::Symmetric).dot(&g);
        let d = filter_grad(&x, &g, 5, Boundary::Symmetric);
        let rhs: f64 = p.taps().iter().zip(d.taps()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_is_bilinear() {
        let mut rng = Seeded::new(9).rng();
        let x1 = random_image(6, 6, &mut rng);
        let x2 = random_image(6, 6, &mut rng);
        let p = random_filter(3, &mut rng);
        let q = random_filter(3, &mut rng);
        let b = Boundary::Symmetric;
        let lhs = conv2_same(&x1.add(&x2.scale(2.0)), &p, b);
        let mut rhs = conv2_same(&x1, &p, b);
        rhs.axpy(2.0, &conv2_same(&x2, &p, b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
        let pq = Filter::new(
            3,
            p.taps().iter().zip(q.taps()).map(|(a, c)| a - c).collect(),
        )
        .unwrap();
        let lhs = conv2_same(&x1, &pq, b);
        let rhs = conv2_same(&x1, &p, b).sub(&conv2_same(&x1, &q, b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-13);
    }
}
