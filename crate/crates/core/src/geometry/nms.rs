use super::{iou_3d, GeometryError, Roi};

/// Greedy non-maximum suppression. Returns indices of the survivors in
/// greedy (descending confidence) order; ties go to the lower input index.
/// A box is suppressed when its IoU with a kept box exceeds the threshold.
pub fn nms_indices(rois: &[Roi], overlap_threshold: f64, max_keep: usize) -> Result<Vec<usize>, GeometryError> {
    if !(overlap_threshold > 0.0 && overlap_threshold < 1.0) {
        return Err(GeometryError::Contract(format!("NMS threshold {overlap_threshold} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..rois.len()).collect();
    order.sort_by(|&a, &b| rois[b].confidence.total_cmp(&rois[a].confidence).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        let mut suppressed = false;
        for &k in &keep {
            if iou_3d(&rois[i], &rois[k])? > overlap_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep)
}

pub fn nms(rois: &[Roi], overlap_threshold: f64, max_keep: usize) -> Result<Vec<Roi>, GeometryError> {
    Ok(nms_indices(rois, overlap_threshold, max_keep)?.into_iter().map(|i| rois[i]).collect())
}
