//! k-means++ seeding and Lloyd iterations over row-major `f32` data.

use rand::Rng;

use crate::numeric::squared_distance;

/// Nearest center and its squared distance; ties go to the lowest index.
#[inline]
pub fn nearest(x: &[f32], centers: &[f32], dim: usize) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = squared_distance(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding. When fewer than `k` distinct points exist, the remaining
/// centers repeat already chosen points.
pub fn kmeans_pp<R: Rng>(data: &[f32], dim: usize, k: usize, rng: &mut R) -> Vec<f32> {
    let n = data.len() / dim;
    assert!(n > 0 && k > 0, "k-means needs data and at least one center");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(row(i), row(first)) as f64).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Guard against landing on a zero-weight point through rounding.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().position(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            let d = squared_distance(row(i), &c) as f64;
            if d < *w {
                *w = d;
            }
        }
        centers.extend_from_slice(&c);
    }
    centers
}

/// Assigns every row to its nearest center. Returns the assignments and the
/// mean squared distance.
pub fn assign(data: &[f32], dim: usize, centers: &[f32], out: &mut Vec<usize>) -> f64 {
    out.clear();
    let mut total = 0.0f64;
    for x in data.chunks_exact(dim) {
        let (j, d) = nearest(x, centers, dim);
        out.push(j);
        total += d as f64;
    }
    total / (data.len() / dim).max(1) as f64
}

/// Moves each center to the mean of its points (accumulated in `f64`);
/// centers without points stay where they are.
pub fn update_centers(data: &[f32], dim: usize, assignments: &[usize], centers: &mut [f32]) {
    let k = centers.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (x, &a) in data.chunks_exact(dim).zip(assignments) {
        counts[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(x) {
            *s += v as f64;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let inv = 1.0 / counts[j] as f64;
        for (c, s) in centers[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
            *c = (s * inv) as f32;
        }
    }
}

/// Runs up to `iters` assign/update rounds starting from `centers`, stopping
/// early once the error stops improving. Returns the final assignments and
/// their mean squared distance.
pub fn lloyd(data: &[f32], dim: usize, centers: &mut [f32], iters: usize) -> (Vec<usize>, f64) {
    let mut assignments = Vec::with_capacity(data.len() / dim);
    let mut err = assign(data, dim, centers, &mut assignments);
    for _ in 0..iters {
        let before = centers.to_vec();
        update_centers(data, dim, &assignments, centers);
        let mut next = Vec::with_capacity(assignments.len());
        let e = assign(data, dim, centers, &mut next);
        if e > err {
            // Rounding can make an update marginally worse; keep the old state.
            centers.copy_from_slice(&before);
            break;
        }
        let converged = next == assignments;
        assignments = next;
        err = e;
        if converged {
            break;
        }
    }
    (assignments, err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nearest_ties_to_lowest() {
        let centers = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(nearest(&[0.0, 0.0], &centers, 2).0, 0);
        assert_eq!(nearest(&[0.5, 0.5], &[0.0, 0.0, 1.0, 1.0], 2).0, 0);
    }

    #[test]
    fn recovers_distinct_points() {
        let pts = [[0.0f32, 0.0], [5.0, 5.0], [-5.0, 5.0]];
        let data: Vec<f32> = (0..60).flat_map(|i| pts[i % 3]).collect();
        let mut c = kmeans_pp(&data, 2, 3, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, err) = lloyd(&data, 2, &mut c, 10);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn identical_points_give_duplicate_centers() {
        let data = vec![1.5f32; 20];
        let mut c = kmeans_pp(&data, 2, 4, &mut ChaCha8Rng::seed_from_u64(2));
        let (a, err) = lloyd(&data, 2, &mut c, 5);
        assert_eq!(err, 0.0);
        assert!(a.iter().all(|&j| j == 0));
        assert!(c.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn lloyd_never_increases_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = kmeans_pp(&data, 4, 16, &mut rng);
        let mut a = Vec::new();
        let mut prev = assign(&data, 4, &c, &mut a);
        for _ in 0..5 {
            let (_, e) = lloyd(&data, 4, &mut c, 1);
            assert!(e <= prev);
            prev = e;
        }
    }
}
