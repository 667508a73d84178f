//! Hot numeric kernels: a vectorizable exponential, unrolled reductions, and
//! the BLAS bridge used for large matrix products.
//!
//! Everything here is branch-light and fixed-order so the compiler can use
//! SIMD while results stay deterministic run to run.


// ── Vectorized exp ──

const LOG2E: f64 = std::f64::consts::LOG2_E;
// ln(2) split so `k * LN2_HI` is exact for |k| <= 2^30.
const LN2_HI: f64 = 0.693_145_751_953_125;
const LN2_LO: f64 = 1.428_606_820_309_417_2e-6;

// Taylor coefficients 1/13! .. 1/2!.
const EXP_C: [f64; 12] = [
    1.0 / 6_227_020_800.0,
    1.0 / 479_001_600.0,
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    1.0 / 2.0,
];
// 2^52 + 2^51: adding it forces round-to-nearest into the low mantissa bits,
// giving both the integer k and the float k without any float->int casts
// (those defeat the vectorizer).
const EXP_MAGIC: f64 = 6_755_399_441_055_744.0;

/// Exponential of every lane of `t`. The polynomial is one dependency chain
/// per lane, so wide blocks (several SIMD vectors) are needed to hide FMA
/// latency; see [`EXP_BLOCK`].
#[inline]
fn exp_core<const N: usize>(t: &[f64; N]) -> [f64; N] {
    let mut v = [0.0f64; N];
    let mut kf = [0.0f64; N];
    let mut r = [0.0f64; N];
    let mut p = [0.0f64; N];
    let mut scale = [0.0f64; N];
    for i in 0..N {
        v[i] = t[i].clamp(-709.0, 709.0);
    }
    for i in 0..N {
        kf[i] = v[i].mul_add(LOG2E, EXP_MAGIC);
    }
    for i in 0..N {
        let ki = (kf[i].to_bits() as i64).wrapping_sub(EXP_MAGIC.to_bits() as i64);
        scale[i] = f64::from_bits((ki.wrapping_add(1023).wrapping_shl(52)) as u64);
    }
    for i in 0..N {
        let k = kf[i] - EXP_MAGIC;
        r[i] = k.mul_add(-LN2_LO, k.mul_add(-LN2_HI, v[i]));
    }
    for i in 0..N {
        p[i] = EXP_C[0];
    }
    for c in &EXP_C[1..] {
        for i in 0..N {
            p[i] = p[i].mul_add(r[i], *c);
        }
    }
    let mut out = [0.0f64; N];
    for i in 0..N {
        p[i] = p[i].mul_add(r[i], 1.0).mul_add(r[i], 1.0);
    }
    for i in 0..N {
        let e = p[i] * scale[i];
        out[i] = if t[i] < -745.0 {
            0.0
        } else if t[i] > 708.0 {
            f64::INFINITY
        } else {
            e
        };
    }
    out
}

/// Block width for the exponential: four 8-lane vectors running in parallel
/// keep the FMA pipeline busy across the polynomial's dependency chain.
const EXP_BLOCK: usize = 32;

/// Replace every element with its exponential.
///
/// Degree-13 Taylor on the reduced argument gives ~2 ulp accuracy in
/// fixed-width branch-free lanes. Exact at 0 (`exp(0) == 1.0`), 0 at -inf,
/// inf at +inf, NaN propagates. Production code reaches `exp_core` through
/// [`softmax_rows`]; this slice form exists for the accuracy tests.
#[cfg(test)]
pub(crate) fn exp_slice(xs: &mut [f64]) {
    let mut chunks = xs.chunks_exact_mut(EXP_BLOCK);
    for c in &mut chunks {
        let block: &mut [f64; EXP_BLOCK] = c.try_into().expect("exact chunk");
        *block = exp_core(block);
    }
    for x in chunks.into_remainder() {
        *x = exp_core(&[*x])[0];
    }
}

/// In-place softmax over each contiguous row of width `len`.
///
/// Shift by the row max, exponentiate, and scale by the reciprocal sum; the
/// shift and sum share the exponential pass.
pub(crate) fn softmax_rows(data: &mut [f64], len: usize) {
    debug_assert_eq!(data.len() % len.max(1), 0);
    for row in data.chunks_exact_mut(len) {
        softmax_row(row);
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let shift = -max(row);
    let mut acc = [0.0f64; EXP_BLOCK];
    let mut chunks = row.chunks_exact_mut(EXP_BLOCK);
    for c in &mut chunks {
        let block: &mut [f64; EXP_BLOCK] = c.try_into().expect("exact chunk");
        let mut t = [0.0f64; EXP_BLOCK];
        for i in 0..EXP_BLOCK {
            t[i] = block[i] + shift;
        }
        let e = exp_core(&t);
        for i in 0..EXP_BLOCK {
            block[i] = e[i];
            acc[i] += e[i];
        }
    }
    let mut total = 0.0;
    for a in acc {
        total += a;
    }
    for x in chunks.into_remainder() {
        let t = [*x + shift];
        let e = exp_core(&t);
        *x = e[0];
        total += e[0];
    }
    let inv = 1.0 / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

// ── Unrolled reductions ──

const LANES: usize = 8;

/// Sum with eight fixed-order accumulators (deterministic, vectorizable).
pub(crate) fn sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            acc[i] += c[i];
        }
    }
    let mut total = 0.0;
    for a in acc {
        total += a;
    }
    for &x in chunks.remainder() {
        total += x;
    }
    total
}

/// Dot product with eight fixed-order FMA accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let n = a.len() - a.len() % LANES;
    let mut i = 0;
    while i < n {
        for l in 0..LANES {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
        i += LANES;
    }
    let mut total = 0.0;
    for x in acc {
        total += x;
    }
    while i < a.len() {
        total = a[i].mul_add(b[i], total);
        i += 1;
    }
    total
}

/// Sum of squared deviations from `center`, eight fixed-order FMA accumulators.
pub(crate) fn centered_sumsq(xs: &[f64], center: f64) -> f64 {
    let mut acc = [0.0f64; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            let d = c[i] - center;
            acc[i] = d.mul_add(d, acc[i]);
        }
    }
    let mut total = 0.0;
    for a in acc {
        total += a;
    }
    for &x in chunks.remainder() {
        let d = x - center;
        total = d.mul_add(d, total);
    }
    total
}

/// Maximum, ignoring NaN like `fold(NEG_INFINITY, f64::max)`.
pub(crate) fn max(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for i in 0..LANES {
            acc[i] = acc[i].max(c[i]);
        }
    }
    let mut m = f64::NEG_INFINITY;
    for a in acc {
        m = m.max(a);
    }
    for &x in chunks.remainder() {
        m = m.max(x);
    }
    m
}

// ── BLAS bridge ──
//
// OpenBLAS is loaded at runtime (dlopen) rather than linked: its kernel
// dispatch runs in an ELF constructor, so forcing the kernel family through
// OPENBLAS_CORETYPE only works if the variable is set before the library is
// loaded. Loading lazily also makes the dependency optional — without the
// library every product falls back to the bundled kernel.

#[allow(non_camel_case_types)]
type blasint = i32;
const CBLAS_ROW_MAJOR: i32 = 101;
const CBLAS_NO_TRANS: i32 = 111;
const CBLAS_TRANS: i32 = 112;

#[allow(clippy::too_many_arguments)]
type DgemmFn = unsafe extern "C" fn(
    layout: i32,
    trans_a: i32,
    trans_b: i32,
    m: blasint,
    n: blasint,
    k: blasint,
    alpha: f64,
    a: *const f64,
    lda: blasint,
    b: *const f64,
    ldb: blasint,
    beta: f64,
    c: *mut f64,
    ldc: blasint,
);

extern "C" {
    fn dlopen(filename: *const std::os::raw::c_char, flag: i32) -> *mut std::os::raw::c_void;
    fn dlsym(
        handle: *mut std::os::raw::c_void,
        symbol: *const std::os::raw::c_char,
    ) -> *mut std::os::raw::c_void;
}

const RTLD_NOW: i32 = 2;

struct Blas {
    dgemm: DgemmFn,
}

// SAFETY: the function pointer targets live for the process lifetime (the
// library is never dlclosed).
unsafe impl Send for Blas {}
unsafe impl Sync for Blas {}

static BLAS: std::sync::OnceLock<Option<Blas>> = std::sync::OnceLock::new();

fn load_blas() -> Option<Blas> {
    // Virtualized CPUs often mask the CPUID model, which makes OpenBLAS's
    // dynamic dispatch fall back to a slow generic kernel. When AVX-512 is
    // actually available, force the matching kernel family; the variable is
    // read by the library's constructor, which runs inside dlopen below.
    if std::env::var_os("OPENBLAS_CORETYPE").is_none() && is_x86_feature_detected!("avx512f") {
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
    }
    // SAFETY: plain dlopen/dlsym usage; symbol signatures match the cblas ABI.
    unsafe {
        let mut handle = std::ptr::null_mut();
        for name in [c"libopenblas.so.0", c"libopenblas.so"] {
            handle = dlopen(name.as_ptr(), RTLD_NOW);
            if !handle.is_null() {
                break;
            }
        }
        if handle.is_null() {
            return None;
        }
        let dgemm = dlsym(handle, c"cblas_dgemm".as_ptr());
        if dgemm.is_null() {
            return None;
        }
        let set_threads = dlsym(handle, c"openblas_set_num_threads".as_ptr());
        if !set_threads.is_null() {
            let set_threads: unsafe extern "C" fn(i32) = std::mem::transmute(set_threads);
            set_threads(1);
        }
        Some(Blas {
            dgemm: std::mem::transmute::<*mut std::os::raw::c_void, DgemmFn>(dgemm),
        })
    }
}

fn blas() -> Option<&'static Blas> {
    BLAS.get_or_init(load_blas).as_ref()
}

/// Whether a strided view (row stride `rs`, column stride `cs`) can be handed
/// to BLAS, and with which transpose flag and leading dimension.
fn blas_layout(rows: usize, cols: usize, rs: isize, cs: isize) -> Option<(i32, blasint)> {
    if cs == 1 && rs >= cols as isize {
        Some((CBLAS_NO_TRANS, rs as blasint))
    } else if rs == 1 && cs >= rows as isize {
        Some((CBLAS_TRANS, cs as blasint))
    } else {
        None
    }
}

/// `c = alpha * a@b + beta * c` through BLAS, `c` having row stride `c_rs`.
/// Returns false when the views' strides don't map onto a BLAS call (the
/// caller then uses the fallback).
#[allow(clippy::too_many_arguments)]
pub(crate) fn blas_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_rs: isize,
    a_cs: isize,
    b: &[f64],
    b_rs: isize,
    b_cs: isize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
) -> bool {
    let Some((ta, lda)) = blas_layout(m, k, a_rs, a_cs) else {
        return false;
    };
    let Some((tb, ldb)) = blas_layout(k, n, b_rs, b_cs) else {
        return false;
    };
    let Some(blas) = blas() else {
        return false;
    };
    // SAFETY: slices cover the strided index space (checked by the callers'
    // shape validation) and dimensions fit i32 for every tensor this crate
    // builds.
    unsafe {
        (blas.dgemm)(
            CBLAS_ROW_MAJOR,
            ta,
            tb,
            m as blasint,
            n as blasint,
            k as blasint,
            alpha,
            a.as_ptr(),
            lda,
            b.as_ptr(),
            ldb,
            beta,
            c.as_mut_ptr(),
            c_rs as blasint,
        );
    }
    true
}

// ── Tests ──

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_libm_closely() {
        let mut worst = 0.0f64;
        for i in 0..20_000 {
            let x = -20.0 + i as f64 * 2e-3; // [-20, 20]
            let mut v = [x];
            exp_slice(&mut v);
            let rel = ((v[0] - x.exp()) / x.exp()).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-14, "worst relative error {worst:e}");
    }

    #[test]
    fn exp_edge_cases_are_exact() {
        let mut v = [0.0, f64::NEG_INFINITY, f64::INFINITY, f64::NAN, -800.0, 800.0];
        exp_slice(&mut v);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], f64::INFINITY);
        assert!(v[3].is_nan());
        assert_eq!(v[4], 0.0);
        assert_eq!(v[5], f64::INFINITY);
    }

    #[test]
    fn reductions_match_naive_evaluation() {
        let xs: Vec<f64> = (0..103).map(|i| ((i * 37) % 19) as f64 - 9.0).collect();
        let ys: Vec<f64> = (0..103).map(|i| ((i * 53) % 23) as f64 * 0.5).collect();
        let naive_sum: f64 = xs.iter().sum();
        assert!((sum(&xs) - naive_sum).abs() < 1e-9);
        let naive_dot: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum();
        assert!((dot(&xs, &ys) - naive_dot).abs() < 1e-9);
        let naive_max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        assert_eq!(max(&xs), naive_max);
        assert_eq!(max(&[]), f64::NEG_INFINITY);
        assert_eq!(max(&[f64::NAN, 2.0, f64::NAN]), 2.0);
    }

    #[test]
    fn blas_gemm_matches_hand_product() {
        // [1 2; 3 4] @ [5 6; 7 8] with transposed-view variants.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        assert!(blas_gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2));
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // a^T stored as a: transposed view has rs=1, cs=2.
        let mut c2 = [0.0; 4];
        assert!(blas_gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c2, 2));
        assert_eq!(c2, [26.0, 30.0, 38.0, 44.0]);

        // beta accumulates.
        let mut c3 = [100.0, 0.0, 0.0, 100.0];
        assert!(blas_gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 1.0, &mut c3, 2));
        assert_eq!(c3, [119.0, 22.0, 43.0, 150.0]);
    }
}

