//! Number-theoretic transform over the prime field p = 2^64 − 2^32 + 1.
//!
//! p − 1 = 2^32·(2^32 − 1), so power-of-two transforms up to 2^32 points
//! exist; 7 generates the multiplicative group.

pub const P: u64 = 0xffff_ffff_0000_0001;
const EPSILON: u64 = 0xffff_ffff; // 2^64 mod p
const GENERATOR: u64 = 7;
pub const MAX_LOG_LEN: u32 = 32;

#[inline]
pub fn add(a: u64, b: u64) -> u64 {
    let (s, c) = a.overflowing_add(b);
    let (s, c2) = s.overflowing_add(if c { EPSILON } else { 0 });
    debug_assert!(!c2);
    if s >= P {
        s - P
    } else {
        s
    }
}

#[inline]
pub fn sub(a: u64, b: u64) -> u64 {
    let (d, borrow) = a.overflowing_sub(b);
    if borrow {
        d.wrapping_add(P)
    } else {
        d
    }
}

#[inline]
pub fn reduce128(x: u128) -> u64 {
    let lo = x as u64;
    let hi = (x >> 64) as u64;
    let hi_hi = hi >> 32;
    let hi_lo = hi & EPSILON;
    // 2^96 ≡ −1 and 2^64 ≡ 2^32 − 1
    let (mut t0, borrow) = lo.overflowing_sub(hi_hi);
    if borrow {
        t0 = t0.wrapping_sub(EPSILON);
    }
    let t1 = hi_lo * EPSILON;
    let (s, carry) = t0.overflowing_add(t1);
    let r = s.wrapping_add(EPSILON * carry as u64);
    if r >= P {
        r - P
    } else {
        r
    }
}

#[inline]
pub fn mul(a: u64, b: u64) -> u64 {
    reduce128(a as u128 * b as u128)
}

pub fn pow(mut a: u64, mut e: u64) -> u64 {
    let mut acc = 1;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul(acc, a);
        }
        a = mul(a, a);
        e >>= 1;
    }
    acc
}

pub fn inv(a: u64) -> u64 {
    pow(a, P - 2)
}

/// A primitive `2^log_n`-th root of unity.
pub fn root_of_unity(log_n: u32) -> u64 {
    assert!(log_n <= MAX_LOG_LEN, "transform too long");
    pow(GENERATOR, (P - 1) >> log_n)
}

fn bit_reverse(a: &mut [u64]) {
    let n = a.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            a.swap(i, j);
        }
    }
}

/// In-place transform of a power-of-two length slice; `inverse` includes
/// the 1/n scaling.
pub fn transform(a: &mut [u64], inverse: bool) {
    let n = a.len();
    assert!(n.is_power_of_two(), "length must be a power of two");
    if n == 1 {
        return;
    }
    bit_reverse(a);
    let mut twiddles = Vec::with_capacity(n / 2);
    let mut len = 2;
    while len <= n {
        let mut w = root_of_unity(len.trailing_zeros());
        if inverse {
            w = inv(w);
        }
        let half = len / 2;
        twiddles.clear();
        let mut x = 1;
        for _ in 0..half {
            twiddles.push(x);
            x = mul(x, w);
        }
        for chunk in a.chunks_exact_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            for ((u, v), &t) in lo.iter_mut().zip(hi.iter_mut()).zip(&twiddles) {
                let vt = mul(*v, t);
                let uu = *u;
                *u = add(uu, vt);
                *v = sub(uu, vt);
            }
        }
        len <<= 1;
    }
    if inverse {
        let scale = inv(n as u64);
        for x in a.iter_mut() {
            *x = mul(*x, scale);
        }
    }
}

/// Cyclic convolution of length `n` (a power of two); inputs shorter than
/// `n` are zero-extended.
pub fn cyclic_convolution(a: &[u64], b: &[u64], n: usize) -> Vec<u64> {
    assert!(a.len() <= n && b.len() <= n);
    let mut fa = a.to_vec();
    fa.resize(n, 0);
    let mut fb = b.to_vec();
    fb.resize(n, 0);
    transform(&mut fa, false);
    transform(&mut fb, false);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = mul(*x, *y);
    }
    transform(&mut fa, true);
    fa
}
