//! DBSCAN over frame embeddings and motion-phase labelling of the clusters.

use serde::{Deserialize, Serialize};

use crate::pose::Pose6DoF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLabel {
    Forward,
    Backward,
    Transition,
    Noise,
}

impl GroupLabel {
    pub const ALL: [GroupLabel; 4] = [
        GroupLabel::Forward,
        GroupLabel::Backward,
        GroupLabel::Transition,
        GroupLabel::Noise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameGroup {
    pub id: usize,
    pub members: Vec<usize>,
    pub label: GroupLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Fixed neighbourhood radius; when absent the `eps_percentile` of all
    /// pairwise distances is used.
    pub eps: Option<f64>,
    pub eps_percentile: f64,
    pub min_pts: usize,
    /// Share of positive axial velocities above which a cluster is forward.
    pub forward_share: f64,
    /// Share below which a cluster is backward.
    pub backward_share: f64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            eps: None,
            eps_percentile: 0.10,
            min_pts: 3,
            forward_share: 0.7,
            backward_share: 0.3,
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Cluster index per point (`None` for noise). Neighbourhoods include the
/// point itself; clusters are numbered in order of their lowest member.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let neighbours = |i: usize| -> Vec<usize> { (0..n).filter(|&j| dist(&points[i], &points[j]) <= eps).collect() };
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nb = neighbours(i);
        if nb.len() < min_pts {
            continue;
        }
        let id = next;
        next += 1;
        label[i] = Some(id);
        let mut queue = nb;
        let mut q = 0;
        while q < queue.len() {
            let j = queue[q];
            q += 1;
            if label[j].is_none() {
                label[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nj = neighbours(j);
            if nj.len() >= min_pts {
                queue.extend(nj);
            }
        }
    }
    label
}

/// The `q`-quantile (0..1) of all pairwise distances.
pub fn percentile_eps(points: &[Vec<f64>], q: f64) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(dist(&points[i], &points[j]));
        }
    }
    if d.is_empty() {
        return 1e-9;
    }
    d.sort_by(f64::total_cmp);
    let idx = ((d.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    d[idx].max(1e-9)
}

/// Axial (tz) velocity per frame; frame 0 borrows the first step.
pub fn axial_velocities(relatives: &[Pose6DoF]) -> Vec<f64> {
    let mut v: Vec<f64> = relatives.iter().map(|r| r.tz).collect();
    if let Some(&first) = v.first() {
        v.insert(0, first);
    } else {
        v.push(0.0);
    }
    v
}

/// Turns cluster assignments into labelled groups using the sign pattern of
/// each cluster's axial velocities. Noise points form one trailing group.
pub fn label_groups(assign: &[Option<usize>], velocity: &[f64], cfg: &GroupingConfig) -> Vec<FrameGroup> {
    let clusters = assign.iter().flatten().max().map_or(0, |m| m + 1);
    let mut groups: Vec<FrameGroup> = (0..clusters)
        .map(|id| FrameGroup {
            id,
            members: Vec::new(),
            label: GroupLabel::Transition,
        })
        .collect();
    let mut noise = Vec::new();
    for (i, a) in assign.iter().enumerate() {
        match a {
            Some(c) => groups[*c].members.push(i),
            None => noise.push(i),
        }
    }
    for g in &mut groups {
        let pos = g.members.iter().filter(|&&i| velocity[i] > 0.0).count() as f64 / g.members.len() as f64;
        g.label = if pos > cfg.forward_share {
            GroupLabel::Forward
        } else if pos < cfg.backward_share {
            GroupLabel::Backward
        } else {
            GroupLabel::Transition
        };
    }
    if !noise.is_empty() {
        groups.push(FrameGroup {
            id: clusters,
            members: noise,
            label: GroupLabel::Noise,
        });
    }
    groups
}

pub fn group_frames(embeddings: &[Vec<f64>], velocity: &[f64], cfg: &GroupingConfig) -> Vec<FrameGroup> {
    let eps = cfg.eps.unwrap_or_else(|| percentile_eps(embeddings, cfg.eps_percentile));
    label_groups(&dbscan(embeddings, eps, cfg.min_pts), velocity, cfg)
}

/// Label per frame index.
pub fn frame_labels(groups: &[FrameGroup], frames: usize) -> Vec<GroupLabel> {
    let mut out = vec![GroupLabel::Noise; frames];
    for g in groups {
        for &m in &g.members {
            out[m] = g.label;
        }
    }
    out
}

#[derive(Serialize)]
struct LabelRecord {
    frame: usize,
    group: usize,
    label: GroupLabel,
}

/// JSON array of `{frame, group, label}` ordered by frame.
pub fn labels_json(groups: &[FrameGroup]) -> String {
    let mut recs: Vec<LabelRecord> = groups
        .iter()
        .flat_map(|g| {
            g.members.iter().map(move |&m| LabelRecord {
                frame: m,
                group: g.id,
                label: g.label,
            })
        })
        .collect();
    recs.sort_by_key(|r| r.frame);
    serde_json::to_string(&recs).expect("labels serialise")
}
