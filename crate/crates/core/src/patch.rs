//! Overlapping square-patch decomposition of an image plane and mean
//! reassembly.

use crate::error::{GlrError, Result};

pub const DEFAULT_PATCH: usize = 26;
pub const DEFAULT_STRIDE: usize = 22;

/// Anchors of the patch grid covering an `height`×`width` plane.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlan {
    height: usize,
    width: usize,
    side: usize,
    stride: usize,
    anchors: Vec<(usize, usize)>,
    coverage: Vec<u32>,
}

fn axis_anchors(extent: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = extent - side;
    let mut anchors: Vec<usize> = (0..=last).step_by(stride).collect();
    if anchors.last() != Some(&last) {
        anchors.push(last);
    }
    anchors
}

/// Anchors at multiples of `stride`, plus a final anchor clamped to
/// `extent - side` so the last patch ends on the border.
pub fn plan_patches(height: usize, width: usize, side: usize, stride: usize) -> Result<PatchPlan> {
    if side == 0 || stride == 0 {
        return Err(GlrError::Config(
            "patch side and stride must be positive".into(),
        ));
    }
    if stride > side {
        return Err(GlrError::Config(format!(
            "stride {stride} exceeds patch side {side}, leaving pixels uncovered"
        )));
    }
    if height < side || width < side {
        return Err(GlrError::Sizing(format!(
            "image {height}x{width} is smaller than the {side}x{side} patch"
        )));
    }
    let rows = axis_anchors(height, side, stride);
    let cols = axis_anchors(width, side, stride);
    let anchors: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let mut coverage = vec![0u32; height * width];
    for &(r, c) in &anchors {
        for y in r..r + side {
            for v in &mut coverage[y * width + c..y * width + c + side] {
                *v += 1;
            }
        }
    }
    Ok(PatchPlan {
        height,
        width,
        side,
        stride,
        anchors,
        coverage,
    })
}

impl PatchPlan {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Pixels per patch.
    pub fn patch_len(&self) -> usize {
        self.side * self.side
    }

    pub fn anchors(&self) -> &[(usize, usize)] {
        &self.anchors
    }

    pub fn num_patches(&self) -> usize {
        self.anchors.len()
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    fn check_plane(&self, len: usize) -> Result<()> {
        if len != self.height * self.width {
            return Err(GlrError::Config(format!(
                "plane has {len} pixels, plan expects {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Copies patch `k` (row-major) out of `plane` into `out`.
    pub fn extract_into(&self, plane: &[f64], k: usize, out: &mut [f64]) {
        let (r, c) = self.anchors[k];
        for (dy, row) in out.chunks_exact_mut(self.side).enumerate() {
            let start = (r + dy) * self.width + c;
            row.copy_from_slice(&plane[start..start + self.side]);
        }
    }

    /// Adds `scale * patch` onto the window of patch `k` in `plane`.
    pub fn scatter_add(&self, patch: &[f64], k: usize, scale: f64, plane: &mut [f64]) {
        let (r, c) = self.anchors[k];
        for (dy, row) in patch.chunks_exact(self.side).enumerate() {
            let start = (r + dy) * self.width + c;
            for (p, v) in plane[start..start + self.side].iter_mut().zip(row) {
                *p += scale * v;
            }
        }
    }
}

pub fn extract_patches(plane: &[f64], plan: &PatchPlan) -> Result<Vec<Vec<f64>>> {
    plan.check_plane(plane.len())?;
    Ok((0..plan.num_patches())
        .map(|k| {
            let mut p = vec![0.0; plan.patch_len()];
            plan.extract_into(plane, k, &mut p);
            p
        })
        .collect())
}

/// Per-pixel mean of all patches covering each pixel.
pub fn aggregate_patches<P: AsRef<[f64]>>(patches: &[P], plan: &PatchPlan) -> Result<Vec<f64>> {
    if patches.len() != plan.num_patches() {
        return Err(GlrError::Config(format!(
            "{} patches given, plan has {}",
            patches.len(),
            plan.num_patches()
        )));
    }
    // Running mean: identical contributions reproduce their value exactly.
    let mut plane = vec![0.0; plan.height * plan.width];
    let mut seen = vec![0u32; plane.len()];
    for (k, p) in patches.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != plan.patch_len() {
            return Err(GlrError::Config(format!(
                "patch {k} has {} values, expected {}",
                p.len(),
                plan.patch_len()
            )));
        }
        let (r, c) = plan.anchors[k];
        for (dy, row) in p.chunks_exact(plan.side).enumerate() {
            let start = (r + dy) * plan.width + c;
            let window = start..start + plan.side;
            for ((m, n), &v) in plane[window.clone()]
                .iter_mut()
                .zip(&mut seen[window])
                .zip(row)
            {
                *n += 1;
                *m += (v - *m) / f64::from(*n);
            }
        }
    }
    Ok(plane)
}

/// Adjoint of [`aggregate_patches`]: each patch receives the upstream
/// gradient of its pixels divided by their coverage counts.
pub fn aggregate_backward(grad_plane: &[f64], plan: &PatchPlan) -> Result<Vec<Vec<f64>>> {
    plan.check_plane(grad_plane.len())?;
    let scaled: Vec<f64> = grad_plane
        .iter()
        .zip(&plan.coverage)
        .map(|(g, &n)| g / f64::from(n))
        .collect();
    extract_patches(&scaled, plan)
}
