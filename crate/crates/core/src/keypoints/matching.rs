use serde::{Deserialize, Serialize};

use super::sift::{Keypoint, DESCRIPTOR_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchParams {
    /// Lowe ratio: best distance must be below `ratio ×` second best.
    pub ratio: f64,
    pub mutual: bool,
    /// Optional gate on pixel displacement between matched keypoints
    /// (columns measured cyclically over `image_width`).
    pub max_pixel_displacement: Option<f64>,
    pub image_width: usize,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            mutual: true,
            max_pixel_displacement: None,
            image_width: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    /// L2 distance between the two descriptors.
    pub distance: f64,
}

fn dist2(a: &[f32; DESCRIPTOR_LEN], b: &[f32; DESCRIPTOR_LEN]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy)]
struct Nearest {
    best: usize,
    best_d2: f32,
    second_d2: f32,
}

/// Nearest and second-nearest neighbour of every `from` descriptor in `to`.
/// Ties keep the lower index.
fn nearest(
    from: &[Keypoint],
    to: &[Keypoint],
    gate: &dyn Fn(&Keypoint, &Keypoint) -> bool,
) -> Vec<Option<Nearest>> {
    from.iter()
        .map(|a| {
            let mut n: Option<Nearest> = None;
            for (j, b) in to.iter().enumerate() {
                if !gate(a, b) {
                    continue;
                }
                let d = dist2(&a.descriptor, &b.descriptor);
                match &mut n {
                    None => {
                        n = Some(Nearest {
                            best: j,
                            best_d2: d,
                            second_d2: f32::INFINITY,
                        })
                    }
                    Some(cur) => {
                        if d < cur.best_d2 {
                            cur.second_d2 = cur.best_d2;
                            cur.best_d2 = d;
                            cur.best = j;
                        } else if d < cur.second_d2 {
                            cur.second_d2 = d;
                        }
                    }
                }
            }
            n
        })
        .collect()
}

fn passes_ratio(n: &Nearest, ratio: f64) -> bool {
    // Strict inequality: equal best and second best is not discriminative.
    (n.best_d2 as f64).sqrt() < ratio * (n.second_d2 as f64).sqrt()
}

/// Mutual nearest neighbours under L2 descriptor distance, filtered by the
/// ratio test in both directions, sorted by ascending distance (ties by
/// `index_a`).
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], params: &MatchParams) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let width = params.image_width as f64;
    let gate = |p: &Keypoint, q: &Keypoint| -> bool {
        match params.max_pixel_displacement {
            None => true,
            Some(max) => {
                let mut dc = (p.col - q.col).abs();
                if width > 0.0 {
                    dc = dc.min(width - dc);
                }
                (p.row - q.row).hypot(dc) <= max
            }
        }
    };
    let ab = nearest(a, b, &gate);
    let ba = if params.mutual {
        nearest(b, a, &|q, p| gate(p, q))
    } else {
        Vec::new()
    };
    let mut out: Vec<Match> = ab
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            let n = n.as_ref()?;
            if !passes_ratio(n, params.ratio) {
                return None;
            }
            if params.mutual {
                let back = ba[n.best].as_ref()?;
                if back.best != i || !passes_ratio(back, params.ratio) {
                    return None;
                }
            }
            Some(Match {
                index_a: i,
                index_b: n.best,
                distance: (dist2(&a[i].descriptor, &b[n.best].descriptor) as f64).sqrt(),
            })
        })
        .collect();
    out.sort_by(|x, y| {
        x.distance
            .total_cmp(&y.distance)
            .then(x.index_a.cmp(&y.index_a))
    });
    out
}
