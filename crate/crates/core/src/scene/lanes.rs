//! Splitting lane polylines into fixed-size point sets.

use alloc::vec::Vec;

use super::{LanePolyline, LaneType, LANE_POINTS, SEGMENT_LENGTH};

/// Chunks shorter than this are rounding residue, not geometry.
const MIN_CHUNK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub lane_type: LaneType,
    /// Index of the source polyline.
    pub source: usize,
    /// Position of this chunk along its source polyline.
    pub chunk: usize,
    /// Points relative to `centroid`.
    pub points: [[f64; 2]; LANE_POINTS],
    pub centroid: [f64; 2],
    pub heading: f64,
    /// Arc-length interval `[start, end]` covered on the source polyline.
    pub span: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<LaneSegment>,
    /// Polylines dropped for having zero length.
    pub skipped: Vec<usize>,
}

fn cumulative_length(points: &[[f64; 2]]) -> Vec<f64> {
    let mut s = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    s.push(0.0);
    for w in points.windows(2) {
        acc += libm::hypot(w[1][0] - w[0][0], w[1][1] - w[0][1]);
        s.push(acc);
    }
    s
}

/// Point at arc length `t`; `hint` is advanced monotonically across calls.
fn point_at(points: &[[f64; 2]], cum: &[f64], t: f64, hint: &mut usize) -> [f64; 2] {
    let last = points.len() - 1;
    while *hint + 1 < last && cum[*hint + 1] < t {
        *hint += 1;
    }
    let (i, j) = (*hint, *hint + 1);
    let len = cum[j] - cum[i];
    let u = if len > 0.0 { ((t - cum[i]) / len).clamp(0.0, 1.0) } else { 0.0 };
    [points[i][0] + u * (points[j][0] - points[i][0]), points[i][1] + u * (points[j][1] - points[i][1])]
}

pub fn segment_lanes(lanes: &[LanePolyline]) -> Segmentation {
    let mut out = Segmentation::default();
    for (source, lane) in lanes.iter().enumerate() {
        if lane.points.len() < 2 {
            out.skipped.push(source);
            continue;
        }
        let cum = cumulative_length(&lane.points);
        let total = *cum.last().unwrap();
        if total <= MIN_CHUNK {
            out.skipped.push(source);
            continue;
        }
        let chunks = libm::ceil((total - MIN_CHUNK) / SEGMENT_LENGTH).max(1.0) as usize;
        let mut hint = 0;
        for chunk in 0..chunks {
            let start = chunk as f64 * SEGMENT_LENGTH;
            let end = if chunk + 1 == chunks { total } else { start + SEGMENT_LENGTH };
            let mut pts = [[0.0; 2]; LANE_POINTS];
            for (k, p) in pts.iter_mut().enumerate() {
                let t = start + (end - start) * k as f64 / (LANE_POINTS - 1) as f64;
                *p = point_at(&lane.points, &cum, t, &mut hint);
            }
            let mut c = [0.0; 2];
            for p in &pts {
                c[0] += p[0];
                c[1] += p[1];
            }
            c[0] /= LANE_POINTS as f64;
            c[1] /= LANE_POINTS as f64;
            let heading = chord_heading(&pts);
            for p in &mut pts {
                p[0] -= c[0];
                p[1] -= c[1];
            }
            out.segments.push(LaneSegment {
                lane_type: lane.lane_type,
                source,
                chunk,
                points: pts,
                centroid: c,
                heading,
                span: (start, end),
            });
        }
    }
    out
}

/// Direction of last minus first point, or of the first non-degenerate edge
/// when the chunk closes on itself.
fn chord_heading(pts: &[[f64; 2]]) -> f64 {
    let first = pts[0];
    let last = pts[pts.len() - 1];
    let (dx, dy) = (last[0] - first[0], last[1] - first[1]);
    if libm::hypot(dx, dy) > 1e-9 {
        return libm::atan2(dy, dx);
    }
    for w in pts.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        if libm::hypot(dx, dy) > 1e-12 {
            return libm::atan2(dy, dx);
        }
    }
    0.0
}
