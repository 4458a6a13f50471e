//! All-pairs baseline: register every pair, keep a maximum spanning tree over
//! registration confidence, and chain transforms out from the best-connected
//! frame.

use std::collections::VecDeque;
use std::time::Instant;

use super::*;

struct Edge {
    a: usize,
    b: usize,
    /// Maps `b` pixels into `a` pixels.
    transform: Transform2D,
    confidence: f64,
    inliers: usize,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Registers all `n(n-1)/2` pairs, then places frames along a maximum spanning
/// tree of registration confidence rooted at its highest-degree frame. The
/// canvas is re-expressed in the first placed frame's coordinates.
pub fn stitch_naive(frames: &[FrameRecord], plan: &StitchPlan) -> Result<(MosaicNode, StitchManifest)> {
    plan.validate()?;
    check_frames(frames)?;
    let mut timings = Vec::new();
    let clock = Instant::now();
    let inputs = par::map(frames, |f| frame_input(f, plan))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    timings.push(StageTiming {
        stage: "features".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });

    let clock = Instant::now();
    let n = frames.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let results = par::map(&pairs, |&(a, b)| {
        let mut reg = Registrar { plan, scale: 1.0, calls: 0 };
        reg.register(&inputs[a].features, &inputs[b].features)
    });
    let mut edges = Vec::new();
    let mut registrations = Vec::with_capacity(pairs.len());
    for (&(a, b), r) in pairs.iter().zip(results) {
        match r {
            Ok(r) => {
                edges.push(Edge {
                    a,
                    b,
                    transform: r.transform,
                    confidence: r.confidence,
                    inliers: r.inliers,
                });
                registrations.push(log(0, b, Some(a), Against::Pair, Ok(r)));
            }
            Err(e) if is_registration_failure(&e) => {
                registrations.push(log(0, b, Some(a), Against::Pair, Err(&e)));
            }
            Err(e) => return Err(e),
        }
    }
    timings.push(StageTiming {
        stage: "registration".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });

    // Kruskal on descending confidence; ties by inliers, then pair order
    edges.sort_by(|x, y| {
        y.confidence
            .total_cmp(&x.confidence)
            .then(y.inliers.cmp(&x.inliers))
            .then((x.a, x.b).cmp(&(y.a, y.b)))
    });
    let mut parent: Vec<usize> = (0..n).collect();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut tree = Vec::new();
    for (k, e) in edges.iter().enumerate() {
        let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
            adjacency[e.a].push(tree.len());
            adjacency[e.b].push(tree.len());
            tree.push(k);
        }
    }

    // largest component; ties to the one holding the lowest index
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut sizes = vec![0usize; n];
    for &r in &roots {
        sizes[r] += 1;
    }
    let best_root = (0..n).max_by(|&x, &y| sizes[x].cmp(&sizes[y]).then(y.cmp(&x))).expect("n >= 1");
    let anchor = (0..n)
        .filter(|&i| roots[i] == best_root)
        .max_by(|&x, &y| adjacency[x].len().cmp(&adjacency[y].len()).then(y.cmp(&x)))
        .expect("component non-empty");

    let mut global: Vec<Option<Transform2D>> = vec![None; n];
    global[anchor] = Some(Transform2D::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(i) = queue.pop_front() {
        let gi = global[i].expect("queued frames are placed");
        for &t in &adjacency[i] {
            let e = &edges[tree[t]];
            let (j, gj) = if e.a == i {
                (e.b, gi.compose(&e.transform))
            } else {
                (e.a, gi.compose(&e.transform.invert()?))
            };
            if global[j].is_none() {
                global[j] = Some(gj);
                queue.push_back(j);
            }
        }
    }

    let first = (0..n).find(|&i| global[i].is_some()).expect("anchor placed");
    let rebase = global[first].expect("placed").invert()?;
    let mut gains = GainAccumulator::new();
    let mut members = Vec::new();
    let mut dropped = Vec::new();
    for i in 0..n {
        match global[i] {
            Some(g) => {
                let t = rebase.compose(&g);
                let gain = if plan.gain_compensation {
                    let src = inputs[i].gain_source();
                    let g = if members.is_empty() { 1.0 } else { gains.estimate(&src, &t)? };
                    gains.paint(&src, &t, g)?;
                    g
                } else {
                    1.0
                };
                members.push(Member {
                    seq_index: frames[i].seq_index,
                    transform: t,
                    gain,
                });
            }
            None => dropped.push(DroppedFrame {
                seq_index: frames[i].seq_index,
                level: 0,
                reason: DropReason::Disconnected,
            }),
        }
    }

    let clock = Instant::now();
    let dims = |seq: usize| frames.iter().find(|f| f.seq_index == seq).expect("member").image.dims();
    let bounds = members_bounds(&members, &dims);
    let (image, mask) = render_members(frames, None, &members, bounds, 1.0, plan.blend)?;
    timings.push(StageTiming {
        stage: "composite".into(),
        seconds: clock.elapsed().as_secs_f64(),
    });
    members.sort_by_key(|m| m.seq_index);
    dropped.sort_by_key(|d| d.seq_index);
    let manifest = StitchManifest {
        method: StitchMethod::Naive,
        plan: plan.clone(),
        frame_count: n,
        registration_calls: pairs.len(),
        levels: vec![LevelLog {
            level: 0,
            inputs: n,
            groups: 1,
            registrations,
        }],
        frames: members
            .iter()
            .map(|m| PlacedFrame {
                seq_index: m.seq_index,
                transform: m.transform,
                gain: m.gain,
            })
            .collect(),
        dropped,
        canvas: bounds,
        timings,
    };
    Ok((
        MosaicNode {
            image,
            mask,
            members,
            bounds,
            level: 0,
        },
        manifest,
    ))
}
