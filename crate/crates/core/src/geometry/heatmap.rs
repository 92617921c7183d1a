use super::camera::FisheyeCamera;
use super::skeleton::{Pose3D, NUM_HEATMAP_JOINTS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rounded heatmap-grid position of a joint, or `None` when it does not
/// project or rounds outside the `[w, h]` grid.
pub fn heatmap_center(cam: &FisheyeCamera, pose: &Pose3D, joint: usize, resolution: [usize; 2]) -> Option<[usize; 2]> {
    let proj = cam.project(&pose.point(joint));
    if !proj.valid {
        return None;
    }
    let (sx, sy) = cam.grid_scale(resolution);
    let (u, v) = ((proj.pixel.x * sx).round(), (proj.pixel.y * sy).round());
    let inside = u >= 0.0 && v >= 0.0 && u < resolution[0] as f64 && v < resolution[1] as f64;
    inside.then_some([u as usize, v as usize])
}

/// Ground-truth heatmaps `[15, h, w]` for the non-head joints: an
/// unnormalised Gaussian with peak 1 at the rounded projected position;
/// all-zero where the joint is out of view.
pub fn render_gt_heatmaps(cam: &FisheyeCamera, pose: &Pose3D, sigma: f64, resolution: [usize; 2]) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    let [w, h] = resolution;
    let mut out = Tensor::zeros(&[NUM_HEATMAP_JOINTS, h, w]);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for c in 0..NUM_HEATMAP_JOINTS {
        let Some([cx, cy]) = heatmap_center(cam, pose, c + 1, resolution) else { continue };
        let plane = &mut out.data_mut()[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 - cy as f64;
            for x in 0..w {
                let dx = x as f64 - cx as f64;
                plane[y * w + x] = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use nalgebra::{Isometry3, Vector2};

    use super::super::skeleton::NUM_JOINTS;
    use super::*;
    use crate::nnops::argmax_channels;

    fn cam() -> FisheyeCamera {
        FisheyeCamera::new(20.0, Vector2::new(32.0, 32.0), [64, 64], 1.6, Isometry3::identity()).unwrap()
    }

    #[test]
    fn centre_joint_peaks_at_grid_centre() {
        let mut pose = Pose3D { joints: [[0.0, 0.0, -1.0]; NUM_JOINTS] };
        pose.joints[1] = [0.0, 0.0, 1.0];
        let hm = render_gt_heatmaps(&cam(), &pose, 1.0, [16, 16]).unwrap();
        assert_eq!(hm.at(&[0, 8, 8]), 1.0);
        assert!(hm.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // every other joint is behind the camera
        assert!(hm.data()[16 * 16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn argmax_recovers_rounded_projection() {
        let mut pose = Pose3D { joints: [[0.0, 0.0, -1.0]; NUM_JOINTS] };
        pose.joints[3] = [0.3, -0.2, 1.0];
        pose.joints[9] = [-0.5, 0.4, 0.7];
        let c = cam();
        let hm = render_gt_heatmaps(&c, &pose, 1.5, [16, 16]).unwrap();
        let peaks = argmax_channels(&hm).unwrap();
        for j in [3, 9] {
            let p = c.project(&pose.point(j)).pixel / 4.0;
            assert_eq!(peaks[j - 1].coords, [p.x.round(), p.y.round()]);
            assert_eq!(peaks[j - 1].value, 1.0);
        }
    }

    #[test]
    fn rejects_non_positive_sigma() {
        let pose = Pose3D { joints: [[0.0; 3]; NUM_JOINTS] };
        assert!(render_gt_heatmaps(&cam(), &pose, 0.0, [4, 4]).is_err());
    }
}
