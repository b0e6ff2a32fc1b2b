//! Channel graph: distance-based adjacency, inter-hemisphere global
//! connections, and the renormalized symmetric Laplacian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{DagamError, Result};

/// Named electrode with a 3-D position on the head model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Electrode {
    pub fn distance(&self, other: &Electrode) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2))
            .sqrt()
    }
}

/// Ordered channel list. Index order is node order everywhere downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeLayout {
    channels: Vec<Electrode>,
    by_name: HashMap<String, usize>,
}

impl ElectrodeLayout {
    pub fn new(channels: Vec<Electrode>) -> Result<Self> {
        if channels.is_empty() {
            return Err(DagamError::Layout("layout has no channels".into()));
        }
        let mut by_name = HashMap::with_capacity(channels.len());
        for (i, e) in channels.iter().enumerate() {
            if !(e.x.is_finite() && e.y.is_finite() && e.z.is_finite()) {
                return Err(DagamError::Layout(format!(
                    "channel {} has non-finite coordinates",
                    e.name
                )));
            }
            if by_name.insert(e.name.clone(), i).is_some() {
                return Err(DagamError::Layout(format!(
                    "duplicate channel name {}",
                    e.name
                )));
            }
        }
        Ok(ElectrodeLayout { channels, by_name })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[Electrode] {
        &self.channels
    }

    pub fn names(&self) -> Vec<&str> {
        self.channels.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// First `n` channels, in order.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(DagamError::Config(format!(
                "cannot take {n} channels from a {}-channel layout",
                self.len()
            )));
        }
        ElectrodeLayout::new(self.channels[..n].to_vec())
    }

    /// Layout reordered so that new channel `i` is old channel `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        ElectrodeLayout::new(perm.iter().map(|&i| self.channels[i].clone()).collect())
    }

    /// Parse `name,x,y,z` CSV with a header row.
    pub fn from_csv_str(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| DagamError::load(origin, Some(1), "empty layout file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["name", "x", "y", "z"] {
            return Err(DagamError::load(
                origin,
                Some(1),
                format!("expected header name,x,y,z, found {header}"),
            ));
        }
        let mut channels = Vec::new();
        for (i, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(DagamError::load(
                    origin,
                    Some(i + 1),
                    format!("expected 4 columns, found {}", fields.len()),
                ));
            }
            let num = |s: &str| {
                s.parse::<f64>().map_err(|e| {
                    DagamError::load(origin, Some(i + 1), format!("bad coordinate {s:?}: {e}"))
                })
            };
            channels.push(Electrode {
                name: fields[0].to_string(),
                x: num(fields[1])?,
                y: num(fields[2])?,
                z: num(fields[3])?,
            });
        }
        ElectrodeLayout::new(channels).map_err(|e| DagamError::load(origin, None, e.to_string()))
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("name,x,y,z\n");
        for e in &self.channels {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", e.name, e.x, e.y, e.z));
        }
        s
    }
}

/// Symmetric channel adjacency plus the global pairs written into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    matrix: Tensor,
    global_pairs: Vec<(usize, usize, f64)>,
}

impl Adjacency {
    /// Wrap an existing square symmetric matrix.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        if r != c {
            return Err(DagamError::dim(format!(
                "adjacency must be square, got {:?}",
                matrix.shape()
            )));
        }
        for i in 0..r {
            for j in 0..i {
                if matrix.get2(i, j) != matrix.get2(j, i) {
                    return Err(DagamError::Graph(format!(
                        "adjacency not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Adjacency {
            matrix,
            global_pairs: Vec::new(),
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn global_pairs(&self) -> &[(usize, usize, f64)] {
        &self.global_pairs
    }
}

/// `A_ij = min(1, sigma / d_ij²)` off the diagonal, zero on it.
pub fn build_adjacency(layout: &ElectrodeLayout, sigma: f64) -> Result<Adjacency> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(DagamError::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let n = layout.len();
    let ch = layout.channels();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = ch[i].distance(&ch[j]);
            if d <= 0.0 {
                return Err(DagamError::Layout(format!(
                    "channels {} and {} are coincident",
                    ch[i].name, ch[j].name
                )));
            }
            let w = (sigma / (d * d)).min(1.0);
            a[i * n + j] = w;
            a[j * n + i] = w;
        }
    }
    Ok(Adjacency {
        matrix: Tensor::from_parts(vec![n, n], a),
        global_pairs: Vec::new(),
    })
}

/// Overwrite the listed symmetric entries with `weight` ∈ [−1, 0].
pub fn apply_global_connections(
    adj: &Adjacency,
    layout: &ElectrodeLayout,
    pairs: &[(String, String)],
    weight: f64,
) -> Result<Adjacency> {
    if !(-1.0..=0.0).contains(&weight) {
        return Err(DagamError::Config(format!(
            "global connection weight must lie in [-1, 0], got {weight}"
        )));
    }
    if layout.len() != adj.n() {
        return Err(DagamError::dim(format!(
            "layout has {} channels but adjacency is {}x{}",
            layout.len(),
            adj.n(),
            adj.n()
        )));
    }
    let mut out = adj.clone();
    let n = adj.n();
    for (a, b) in pairs {
        let lookup = |name: &str| {
            layout
                .index_of(name)
                .ok_or_else(|| DagamError::Layout(format!("unknown channel {name}")))
        };
        let (i, j) = (lookup(a)?, lookup(b)?);
        if i == j {
            return Err(DagamError::Layout(format!(
                "global pair joins {a} to itself"
            )));
        }
        let m = out.matrix.data_mut();
        m[i * n + j] = weight;
        m[j * n + i] = weight;
        out.global_pairs.push((i, j, weight));
    }
    Ok(out)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃_ii = Σ_j |Ã_ij|`.
pub fn renormalized_laplacian(adj: &Adjacency) -> Result<Tensor> {
    let n = adj.n();
    let a = adj.matrix();
    let mut tilde = a.data().to_vec();
    for i in 0..n {
        tilde[i * n + i] += 1.0;
    }
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = tilde[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
        if deg <= 0.0 || !deg.is_finite() {
            return Err(DagamError::Graph(format!(
                "row {i} has absolute degree {deg} after adding self-loops"
            )));
        }
        inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            tilde[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Ok(Tensor::from_parts(vec![n, n], tilde))
}

/// Full graph pipeline: adjacency, global connections, Laplacian.
pub fn prepare_graph(
    layout: &ElectrodeLayout,
    sigma: f64,
    pairs: &[(String, String)],
    weight: f64,
) -> Result<(Adjacency, Tensor)> {
    let adj = build_adjacency(layout, sigma)?;
    let adj = apply_global_connections(&adj, layout, pairs, weight)?;
    let lap = renormalized_laplacian(&adj)?;
    Ok((adj, lap))
}

/// Radius of the built-in head model. With `sigma = 5` it puts the median
/// off-diagonal adjacency of the 62-channel montage near 0.3.
pub const HEAD_RADIUS: f64 = 3.7;

// (name, polar angle from vertex in degrees, azimuth in degrees, 0 = nasion, positive = right)
type Polar = (&'static str, f64, f64);

fn polar_to_xyz(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    [t.sin() * p.sin(), t.sin() * p.cos(), t.cos()]
}

fn slerp(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let omega = dot.clamp(-1.0, 1.0).acos();
    if omega.abs() < 1e-12 {
        return a;
    }
    let (sa, sb) = (((1.0 - f) * omega).sin(), (f * omega).sin());
    let s = omega.sin();
    [
        (sa * a[0] + sb * b[0]) / s,
        (sa * a[1] + sb * b[1]) / s,
        (sa * a[2] + sb * b[2]) / s,
    ]
}

/// The 62-channel extended 10-20 montage in the channel order used by the
/// SEED recordings, placed on an idealized spherical head of radius
/// [`HEAD_RADIUS`].
///
/// Circumference electrodes sit 72° from the vertex at 18° azimuth steps;
/// off-midline electrodes of each coronal row are spaced evenly along the arc
/// from the row's lateral end to its midline electrode.
pub fn seed_montage() -> ElectrodeLayout {
    const ANCHORS: &[Polar] = &[
        ("FPZ", 72.0, 0.0),
        ("FP1", 72.0, -18.0),
        ("FP2", 72.0, 18.0),
        ("AF7", 72.0, -36.0),
        ("AF8", 72.0, 36.0),
        ("F7", 72.0, -54.0),
        ("F8", 72.0, 54.0),
        ("FT7", 72.0, -72.0),
        ("FT8", 72.0, 72.0),
        ("T7", 72.0, -90.0),
        ("T8", 72.0, 90.0),
        ("TP7", 72.0, -108.0),
        ("TP8", 72.0, 108.0),
        ("P7", 72.0, -126.0),
        ("P8", 72.0, 126.0),
        ("PO7", 72.0, -144.0),
        ("PO8", 72.0, 144.0),
        ("O1", 72.0, -162.0),
        ("O2", 72.0, 162.0),
        ("OZ", 72.0, 180.0),
        ("AFZ", 54.0, 0.0),
        ("FZ", 36.0, 0.0),
        ("FCZ", 18.0, 0.0),
        ("CZ", 0.0, 0.0),
        ("CPZ", 18.0, 180.0),
        ("PZ", 36.0, 180.0),
        ("POZ", 54.0, 180.0),
        ("CB1", 90.0, -162.0),
        ("CB2", 90.0, 162.0),
    ];
    let anchor = |name: &str| -> [f64; 3] {
        let &(_, t, p) = ANCHORS.iter().find(|a| a.0 == name).expect("anchor");
        polar_to_xyz(t, p)
    };
    // (row prefix, left end, midline, right end, electrodes as (name, 10-10 column 1..4 from lateral))
    let row = |lateral_l: &str, mid: &str, lateral_r: &str, name: &str, col: usize, right: bool| {
        let end = if right { lateral_r } else { lateral_l };
        (
            name.to_string(),
            slerp(anchor(end), anchor(mid), col as f64 / 4.0),
        )
    };
    let mut pos: Vec<(String, [f64; 3])> = Vec::new();
    let add_anchor =
        |pos: &mut Vec<(String, [f64; 3])>, n: &str| pos.push((n.to_string(), anchor(n)));

    for n in ["FP1", "FPZ", "FP2"] {
        add_anchor(&mut pos, n);
    }
    pos.push(row("AF7", "AFZ", "AF8", "AF3", 2, false));
    pos.push(row("AF7", "AFZ", "AF8", "AF4", 2, true));
    for (l, m, r, p) in [
        ("F7", "FZ", "F8", "F"),
        ("FT7", "FCZ", "FT8", "FC"),
        ("T7", "CZ", "T8", "C"),
        ("TP7", "CPZ", "TP8", "CP"),
        ("P7", "PZ", "P8", "P"),
    ] {
        // left lateral, 5 3 1, midline, 2 4 6, right lateral
        add_anchor(&mut pos, l);
        for (num, col) in [(5, 1), (3, 2), (1, 3)] {
            pos.push(row(l, m, r, &format!("{p}{num}"), col, false));
        }
        add_anchor(&mut pos, m);
        for (num, col) in [(2, 3), (4, 2), (6, 1)] {
            pos.push(row(l, m, r, &format!("{p}{num}"), col, true));
        }
        add_anchor(&mut pos, r);
    }
    add_anchor(&mut pos, "PO7");
    pos.push(row("PO7", "POZ", "PO8", "PO5", 1, false));
    pos.push(row("PO7", "POZ", "PO8", "PO3", 2, false));
    add_anchor(&mut pos, "POZ");
    pos.push(row("PO7", "POZ", "PO8", "PO4", 2, true));
    pos.push(row("PO7", "POZ", "PO8", "PO6", 1, true));
    for n in ["PO8", "CB1", "O1", "OZ", "O2", "CB2"] {
        add_anchor(&mut pos, n);
    }

    let channels = pos
        .into_iter()
        .map(|(name, [x, y, z])| Electrode {
            name,
            x: x * HEAD_RADIUS,
            y: y * HEAD_RADIUS,
            z: z * HEAD_RADIUS,
        })
        .collect();
    ElectrodeLayout::new(channels).expect("built-in montage is valid")
}

/// Left/right frontal and temporal pairs used as default global connections.
pub const DEFAULT_GLOBAL_PAIRS: &[(&str, &str)] = &[
    ("FP1", "FP2"),
    ("AF3", "AF4"),
    ("F7", "F8"),
    ("F5", "F6"),
    ("F3", "F4"),
    ("FT7", "FT8"),
    ("T7", "T8"),
    ("TP7", "TP8"),
];

/// Default global pairs restricted to channels present in `layout`.
pub fn default_global_pairs(layout: &ElectrodeLayout) -> Vec<(String, String)> {
    DEFAULT_GLOBAL_PAIRS
        .iter()
        .filter(|(a, b)| layout.index_of(a).is_some() && layout.index_of(b).is_some())
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_layout(xs: &[f64]) -> ElectrodeLayout {
        ElectrodeLayout::new(
            xs.iter()
                .enumerate()
                .map(|(i, &x)| Electrode {
                    name: format!("C{i}"),
                    x,
                    y: 0.0,
                    z: 0.0,
                })
                .collect(),
        )
        .unwrap()
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn adjacency_formula_and_clamp() {
        let a = build_adjacency(&line_layout(&[0.0, 2.0]), 5.0).unwrap();
        assert_eq!(a.matrix().get2(0, 1), 1.0);
        let a = build_adjacency(&line_layout(&[0.0, 5.0]), 5.0).unwrap();
        assert!((a.matrix().get2(0, 1) - 0.2).abs() < 1e-15);
        assert_eq!(a.matrix().get2(1, 0), a.matrix().get2(0, 1));
        assert_eq!(a.matrix().get2(0, 0), 0.0);
    }

    #[test]
    fn coincident_electrodes_are_a_layout_error() {
        let err = build_adjacency(&line_layout(&[1.0, 1.0]), 5.0).unwrap_err();
        assert!(matches!(err, DagamError::Layout(ref m) if m.contains("C0") && m.contains("C1")));
        assert!(matches!(
            build_adjacency(&line_layout(&[0.0, 1.0]), 0.0),
            Err(DagamError::Config(_))
        ));
    }

    #[test]
    fn global_connections() {
        let layout = seed_montage();
        let adj = build_adjacency(&layout, 5.0).unwrap();
        let pairs = vec![("F3".to_string(), "F4".to_string())];
        let g = apply_global_connections(&adj, &layout, &pairs, -0.5).unwrap();
        let (i, j) = (
            layout.index_of("F3").unwrap(),
            layout.index_of("F4").unwrap(),
        );
        assert_eq!(g.matrix().get2(i, j), -0.5);
        assert_eq!(g.matrix().get2(j, i), -0.5);
        let changed = g
            .matrix()
            .data()
            .iter()
            .zip(adj.matrix().data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 2);

        let same = apply_global_connections(&adj, &layout, &[], -1.0).unwrap();
        assert_eq!(same.matrix(), adj.matrix());

        let zero = apply_global_connections(&adj, &layout, &pairs, 0.0).unwrap();
        assert_eq!(zero.matrix().get2(i, j), 0.0);

        assert!(matches!(
            apply_global_connections(&adj, &layout, &pairs, 0.5),
            Err(DagamError::Config(_))
        ));
        let bad = vec![("F3".to_string(), "XX".to_string())];
        assert!(matches!(
            apply_global_connections(&adj, &layout, &bad, -1.0),
            Err(DagamError::Layout(_))
        ));
    }

    #[test]
    fn laplacian_hand_cases() {
        let l = renormalized_laplacian(
            &Adjacency::from_matrix(Tensor::zeros(&[2, 2]).unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(l.data(), &[1.0, 0.0, 0.0, 1.0]);

        let l = renormalized_laplacian(
            &Adjacency::from_matrix(mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap(),
        )
        .unwrap();
        for v in l.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }

        let l = renormalized_laplacian(
            &Adjacency::from_matrix(mat(&[&[0.0, -0.5], &[-0.5, 0.0]])).unwrap(),
        )
        .unwrap();
        let expect = [2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0];
        for (v, e) in l.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn self_cancelling_row_is_a_graph_error() {
        let adj = Adjacency::from_matrix(mat(&[&[-1.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert!(matches!(
            renormalized_laplacian(&adj),
            Err(DagamError::Graph(_))
        ));
    }

    #[test]
    fn montage_shape_and_calibration() {
        let m = seed_montage();
        assert_eq!(m.len(), 62);
        assert_eq!(m.names()[..5], ["FP1", "FPZ", "FP2", "AF3", "AF4"]);
        assert_eq!(m.names()[57..], ["CB1", "O1", "OZ", "O2", "CB2"]);
        let adj = build_adjacency(&m, 5.0).unwrap();
        let mut off: Vec<f64> = (0..62)
            .flat_map(|i| (0..62).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| adj.matrix().get2(i, j))
            .collect();
        off.sort_by(f64::total_cmp);
        let median = off[off.len() / 2];
        assert!((0.25..0.35).contains(&median), "median {median}");
        assert!(off.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert_eq!(default_global_pairs(&m).len(), DEFAULT_GLOBAL_PAIRS.len());
    }

    #[test]
    fn layout_csv_round_trip_and_errors() {
        let m = seed_montage();
        let back = ElectrodeLayout::from_csv_str(&m.to_csv_string(), Path::new("l.csv")).unwrap();
        assert_eq!(back, m);
        let err =
            ElectrodeLayout::from_csv_str("name,x,y,z\nA,1,2\n", Path::new("l.csv")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(ElectrodeLayout::from_csv_str("a,b\n", Path::new("l.csv")).is_err());
        let dup = "name,x,y,z\nA,0,0,0\nA,1,0,0\n";
        assert!(ElectrodeLayout::from_csv_str(dup, Path::new("l.csv")).is_err());
    }
}
