use super::*;
use crate::synthgen::{render_slide, Sweep, SweepSpec};

fn texture() -> ImageBuffer {
    render_slide(1024, 1024, 3)
}

fn crops(tex: &ImageBuffer, offsets: &[(u32, u32)], w: u32, h: u32) -> Vec<FrameRecord> {
    offsets
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| FrameRecord::from_image(i, tex.crop(x, y, w, h).unwrap()).unwrap())
        .collect()
}

/// 2x2 serpentine with 35% overlap.
fn four_crops() -> (Vec<FrameRecord>, Vec<(u32, u32)>) {
    let offsets = vec![(0, 0), (390, 0), (390, 292), (0, 292)];
    (crops(&texture(), &offsets, 600, 450), offsets)
}

fn center_error(t: &Transform2D, offset: (u32, u32), origin: (u32, u32), w: u32, h: u32) -> f64 {
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let (x, y) = t.apply(cx, cy);
    let tx = offset.0 as f64 - origin.0 as f64 + cx;
    let ty = offset.1 as f64 - origin.1 as f64 + cy;
    ((x - tx).powi(2) + (y - ty).powi(2)).sqrt()
}

#[test]
fn single_frame_is_identity() {
    let tex = texture();
    let frames = crops(&tex, &[(10, 20)], 300, 200);
    let node = stitch_batch(&frames, &StitchPlan::default()).unwrap();
    assert_eq!(node.members.len(), 1);
    assert_eq!(node.members[0].transform, Transform2D::identity());
    assert_eq!(node.image, frames[0].image);
    assert_eq!(node.bounds, Rect::new(0, 0, 300, 200));
}

#[test]
fn four_crops_reconstruct_offsets() {
    let (frames, offsets) = four_crops();
    let node = stitch_batch(&frames, &StitchPlan::default()).unwrap();
    assert_eq!(node.members.len(), 4);
    for m in &node.members {
        let e = center_error(&m.transform, offsets[m.seq_index], offsets[0], 600, 450);
        assert!(e <= 2.0, "frame {} off by {e}", m.seq_index);
    }
}

#[test]
fn featureless_frame_is_dropped() {
    let tex = texture();
    let mut frames = crops(&tex, &[(0, 100), (200, 100), (400, 100)], 600, 450);
    frames[1] = FrameRecord::from_image(1, ImageBuffer::filled(600, 450, 3, 255)).unwrap();
    let plan = StitchPlan::default();
    let (node, manifest) = stitch_recursive(&frames, &plan).unwrap();
    let placed: Vec<usize> = node.members.iter().map(|m| m.seq_index).collect();
    assert_eq!(placed, vec![0, 2]);
    assert_eq!(manifest.dropped.len(), 1);
    assert_eq!(manifest.dropped[0].seq_index, 1);
    assert!(matches!(manifest.dropped[0].reason, DropReason::NoConsensus(_)));
    let e = center_error(manifest.transform_of(2).unwrap(), (400, 100), (0, 100), 600, 450);
    assert!(e <= 2.0);
}

#[test]
fn grouping_follows_ceiling_arithmetic() {
    assert_eq!(level_group_counts(120, 40), vec![3, 1]);
    assert_eq!(level_group_counts(60, 40), vec![2, 1]);
    assert_eq!(level_group_counts(40, 40), vec![1]);
    assert_eq!(level_group_counts(1, 40), vec![1]);
    assert_eq!(level_group_counts(9, 2), vec![5, 3, 2, 1]);
}

const FW: u32 = 400;
const FH: u32 = 300;

/// Two-row serpentine of `FW x FH` frames with 30% overlap.
fn strip(n: usize) -> (Vec<FrameRecord>, Vec<(u32, u32)>) {
    let per_row = n.div_ceil(2);
    let tex = render_slide(40 + per_row as u32 * 280 + 120, 700, 5);
    let offsets: Vec<(u32, u32)> = (0..n)
        .map(|i| {
            let row = i / per_row;
            let col = if row == 0 { i % per_row } else { per_row - 1 - i % per_row };
            (20 + col as u32 * 280, 40 + row as u32 * 210)
        })
        .collect();
    (crops(&tex, &offsets, FW, FH), offsets)
}

#[test]
fn recursion_levels_and_call_count() {
    let (frames, offsets) = strip(8);
    let plan = StitchPlan {
        batch_size: 3,
        ..Default::default()
    };
    let (node, manifest) = stitch_recursive(&frames, &plan).unwrap();
    let groups: Vec<usize> = manifest.levels.iter().map(|l| l.groups).collect();
    assert_eq!(groups, level_group_counts(8, 3));
    assert_eq!(node.level, groups.len() - 1);
    assert!(manifest.dropped.is_empty(), "{:#?}", (&manifest.dropped, &manifest.levels));
    // (n - batches) at level 0, then (nodes - groups) per level above
    let bound: usize = {
        let mut inputs = 8;
        let mut total = 0;
        for g in &groups {
            total += inputs - g;
            inputs = *g;
        }
        total
    };
    assert_eq!(manifest.registration_calls, bound);
    for f in &manifest.frames {
        let e = center_error(&f.transform, offsets[f.seq_index], offsets[0], FW, FH);
        assert!(e <= 3.0, "frame {} off by {e}", f.seq_index);
    }
}

#[test]
fn naive_counts_all_pairs_and_agrees() {
    let (frames, offsets) = strip(6);
    let plan = StitchPlan::default();
    let (_, naive) = stitch_naive(&frames, &plan).unwrap();
    assert_eq!(naive.registration_calls, 15);
    let (_, rec) = stitch_recursive(&frames, &plan).unwrap();
    for f in &naive.frames {
        let e = center_error(&f.transform, offsets[f.seq_index], offsets[0], FW, FH);
        assert!(e <= 2.0);
        let (a, b) = (f.transform.translation_part(), rec.transform_of(f.seq_index).unwrap().translation_part());
        assert!((a.0 - b.0).abs() <= 5.0 && (a.1 - b.1).abs() <= 5.0);
    }
}

#[test]
fn naive_matches_batch_on_four_crops() {
    let (frames, _) = four_crops();
    let plan = StitchPlan::default();
    let node = stitch_batch(&frames, &plan).unwrap();
    let (naive, _) = stitch_naive(&frames, &plan).unwrap();
    for (a, b) in node.members.iter().zip(&naive.members) {
        assert_eq!(a.seq_index, b.seq_index);
        let (x0, y0) = a.transform.apply(299.5, 224.5);
        let (x1, y1) = b.transform.apply(299.5, 224.5);
        assert!(((x0 - x1).powi(2) + (y0 - y1).powi(2)).sqrt() <= 2.0);
    }
}

#[test]
fn two_frames_naive_equals_batch() {
    let (frames, _) = four_crops();
    let plan = StitchPlan::default();
    let node = stitch_batch(&frames[..2], &plan).unwrap();
    let (naive, _) = stitch_naive(&frames[..2], &plan).unwrap();
    assert_eq!(node.members, naive.members);
    assert_eq!(node.bounds, naive.bounds);
    assert_eq!(node.image, naive.image);
}

#[test]
fn self_stitch_without_gain_is_idempotent() {
    let tex = texture();
    let f = tex.crop(100, 100, 400, 300).unwrap();
    let frames = vec![
        FrameRecord::from_image(0, f.clone()).unwrap(),
        FrameRecord::from_image(1, f.clone()).unwrap(),
    ];
    let plan = StitchPlan {
        gain_compensation: false,
        ..Default::default()
    };
    let node = stitch_batch(&frames, &plan).unwrap();
    assert_eq!(node.image, f);
}

#[test]
fn stitching_is_deterministic() {
    let (frames, _) = strip(6);
    let plan = StitchPlan {
        batch_size: 4,
        ..Default::default()
    };
    let (n1, m1) = stitch_recursive(&frames, &plan).unwrap();
    let (n2, m2) = stitch_recursive(&frames, &plan).unwrap();
    assert_eq!(serde_json::to_string(&m1).unwrap(), serde_json::to_string(&m2).unwrap());
    assert_eq!(n1.image, n2.image);
}

#[test]
fn placed_centers_inside_canvas_and_area_bound() {
    let (frames, _) = strip(6);
    let (node, manifest) = stitch_recursive(&frames, &StitchPlan::default()).unwrap();
    let mut area = 0u64;
    for f in &manifest.frames {
        let (x, y) = f.transform.apply((FW - 1) as f64 / 2.0, (FH - 1) as f64 / 2.0);
        assert!(manifest.canvas.contains_point(x, y));
        area += (FW * FH) as u64;
    }
    assert!(node.bounds.area() <= area);
    assert_eq!(node.bounds, manifest.canvas);
    assert_eq!(node.image.dims(), (node.bounds.width, node.bounds.height));
}

#[test]
fn every_frame_accounted_for() {
    let tex = texture();
    let mut frames = crops(&tex, &[(0, 0), (200, 0), (400, 0), (400, 150)], 500, 400);
    frames[2] = FrameRecord::from_image(2, ImageBuffer::filled(500, 400, 3, 255)).unwrap();
    let (_, m) = stitch_recursive(&frames, &StitchPlan { batch_size: 2, ..Default::default() }).unwrap();
    let mut seen: Vec<usize> = m.frames.iter().map(|f| f.seq_index).chain(m.dropped.iter().map(|d| d.seq_index)).collect();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 3]);
}

#[test]
fn exact_crop_sweep_offsets_within_one_pixel() {
    let spec = SweepSpec {
        slide_width: 1400,
        slide_height: 1100,
        max_stops: Some(4),
        ..Default::default()
    };
    let sweep = Sweep::new(&spec).unwrap();
    let frames: Vec<FrameRecord> = sweep
        .stop_stills()
        .into_iter()
        .enumerate()
        .map(|(i, (img, _))| FrameRecord::from_image(i, img).unwrap())
        .collect();
    let (_, m) = stitch_recursive(&frames, &StitchPlan::default()).unwrap();
    assert_eq!(m.frames.len(), 4);
    let t0 = sweep.truth.stops[0].transform.invert().unwrap();
    for f in &m.frames {
        let truth = t0.compose(&sweep.truth.stops[f.seq_index].transform);
        let (a, b) = f.transform.translation_part();
        let (c, d) = truth.translation_part();
        assert!((a - c).abs() <= 1.0 && (b - d).abs() <= 1.0, "{:?} vs {:?}", (a, b), (c, d));
    }
}

#[test]
fn plan_validation() {
    for b in [0, 1, 201] {
        let plan = StitchPlan {
            batch_size: b,
            ..Default::default()
        };
        assert!(matches!(plan.validate(), Err(Error::InvalidParameter(_))));
    }
    assert!(StitchPlan::default().validate().is_ok());
}

#[test]
fn empty_input() {
    assert!(matches!(stitch_batch(&[], &StitchPlan::default()), Err(Error::EmptyInput)));
    assert!(matches!(stitch_recursive(&[], &StitchPlan::default()), Err(Error::EmptyInput)));
    assert!(matches!(stitch_naive(&[], &StitchPlan::default()), Err(Error::EmptyInput)));
}

#[test]
fn batch_larger_than_plan_rejected() {
    let (frames, _) = four_crops();
    let plan = StitchPlan {
        batch_size: 3,
        ..Default::default()
    };
    assert!(stitch_batch(&frames, &plan).is_err());
}
