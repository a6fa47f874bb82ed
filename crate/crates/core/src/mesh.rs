//! Meshes of segments, linear triangles and bilinear quadrilaterals, the
//! built-in generators and the plain-text mesh format.
//!
//! The text format has up to four sections, each introduced by a header line:
//!
//! ```text
//! # comment
//! NODES
//! 0 0.0 0.0
//! 1 1.0 0.0
//! 2 0.0 1.0
//! ELEMENTS
//! 0 triangle 0 1 2
//! DIRICHLET
//! 1 0.0
//! NEUMANN
//! 0 2
//! ```
//!
//! Node lines carry one coordinate in 1D and two in 2D. Element kinds are
//! `segment`, `triangle` and `quad`. `DIRICHLET` lines are `node value`;
//! `NEUMANN` lines list the nodes of a zero-flux boundary facet and are kept
//! for bookkeeping only, since zero flux is the natural condition.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementKind {
    Segment2,
    Triangle3,
    Quad4,
}

impl ElementKind {
    pub fn num_nodes(self) -> usize {
        match self {
            ElementKind::Segment2 => 2,
            ElementKind::Triangle3 => 3,
            ElementKind::Quad4 => 4,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ElementKind::Segment2 => 1,
            _ => 2,
        }
    }

    fn keyword(self) -> &'static str {
        match self {
            ElementKind::Segment2 => "segment",
            ElementKind::Triangle3 => "triangle",
            ElementKind::Quad4 => "quad",
        }
    }

    fn from_keyword(s: &str) -> Option<Self> {
        match s {
            "segment" => Some(ElementKind::Segment2),
            "triangle" => Some(ElementKind::Triangle3),
            "quad" => Some(ElementKind::Quad4),
            _ => None,
        }
    }

    /// Local node pairs (2D) or single nodes (1D) forming the element facets.
    fn facets(self) -> &'static [&'static [usize]] {
        match self {
            ElementKind::Segment2 => &[&[0], &[1]],
            ElementKind::Triangle3 => &[&[0, 1], &[1, 2], &[2, 0]],
            ElementKind::Quad4 => &[&[0, 1], &[1, 2], &[2, 3], &[3, 0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub kind: ElementKind,
    pub nodes: Vec<usize>,
}

impl Element {
    pub fn new(kind: ElementKind, nodes: Vec<usize>) -> Self {
        Element { kind, nodes }
    }
}

/// A facet on the mesh boundary together with the element that owns it.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFacet {
    pub nodes: Vec<usize>,
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    coords: Vec<Point>,
    elements: Vec<Element>,
    dirichlet: BTreeMap<usize, f64>,
    neumann: Vec<Vec<usize>>,
    centroids: Vec<Point>,
}

impl Mesh {
    pub fn new(
        dim: usize,
        coords: Vec<Point>,
        elements: Vec<Element>,
        dirichlet: BTreeMap<usize, f64>,
    ) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidMesh(format!("dimension {dim} is not supported")));
        }
        if elements.is_empty() {
            return Err(Error::InvalidMesh("mesh has no elements".into()));
        }
        for (e, el) in elements.iter().enumerate() {
            if el.kind.dim() != dim {
                return Err(Error::InvalidMesh(format!(
                    "element {e} of kind {} in a {dim}D mesh",
                    el.kind.keyword()
                )));
            }
            if el.nodes.len() != el.kind.num_nodes() {
                return Err(Error::InvalidMesh(format!(
                    "element {e} has {} nodes, expected {}",
                    el.nodes.len(),
                    el.kind.num_nodes()
                )));
            }
            if let Some(&bad) = el.nodes.iter().find(|&&n| n >= coords.len()) {
                return Err(Error::InvalidMesh(format!(
                    "element {e} references node {bad} but the mesh has {} nodes",
                    coords.len()
                )));
            }
        }
        if let Some((&bad, _)) = dirichlet.iter().find(|(&n, _)| n >= coords.len()) {
            return Err(Error::InvalidMesh(format!("Dirichlet node {bad} does not exist")));
        }
        let centroids = elements
            .iter()
            .map(|el| {
                let k = el.nodes.len() as f64;
                let mut c = [0.0; 2];
                for &n in &el.nodes {
                    c[0] += coords[n][0] / k;
                    c[1] += coords[n][1] / k;
                }
                c
            })
            .collect();
        let mesh = Mesh { dim, coords, elements, dirichlet, neumann: Vec::new(), centroids };
        for e in 0..mesh.num_elements() {
            let measure = mesh.element_measure(e);
            if !(measure > 1e-14) {
                return Err(Error::DegenerateElement { index: e, measure });
            }
        }
        Ok(mesh)
    }

    /// Uniform mesh of `n` segments on `[a, b]`, no boundary conditions.
    pub fn interval(n: usize, a: f64, b: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidMesh("interval needs at least one element".into()));
        }
        let h = (b - a) / n as f64;
        let coords = (0..=n).map(|i| [a + h * i as f64, 0.0]).collect();
        let elements = (0..n).map(|i| Element::new(ElementKind::Segment2, vec![i, i + 1])).collect();
        Mesh::new(1, coords, elements, BTreeMap::new())
    }

    /// Structured triangulation of the unit square with `nx * ny` cells, each
    /// cut into two triangles along its lower-left to upper-right diagonal.
    ///
    /// With `hole = Some((centre, radius))` every cell whose centre lies inside
    /// the circle is dropped, together with nodes that are no longer used.
    pub fn unit_square_triangles(nx: usize, ny: usize, hole: Option<(Point, f64)>) -> Result<Self> {
        let (coords, cells) = Self::grid(nx, ny, hole);
        let mut elements = Vec::with_capacity(cells.len() * 2);
        for [a, b, c, d] in cells {
            elements.push(Element::new(ElementKind::Triangle3, vec![a, b, c]));
            elements.push(Element::new(ElementKind::Triangle3, vec![a, c, d]));
        }
        Self::compact(coords, elements)
    }

    /// Structured mesh of bilinear quadrilaterals on the unit square.
    pub fn unit_square_quads(nx: usize, ny: usize) -> Result<Self> {
        let (coords, cells) = Self::grid(nx, ny, None);
        let elements = cells.into_iter().map(|c| Element::new(ElementKind::Quad4, c.to_vec())).collect();
        Self::compact(coords, elements)
    }

    fn grid(nx: usize, ny: usize, hole: Option<(Point, f64)>) -> (Vec<Point>, Vec<[usize; 4]>) {
        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut coords = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                coords.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let mut cells = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                if let Some((c, r)) = hole {
                    let cx = (i as f64 + 0.5) / nx as f64;
                    let cy = (j as f64 + 0.5) / ny as f64;
                    if (cx - c[0]).hypot(cy - c[1]) < r {
                        continue;
                    }
                }
                cells.push([node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]);
            }
        }
        (coords, cells)
    }

    fn compact(coords: Vec<Point>, mut elements: Vec<Element>) -> Result<Self> {
        let mut remap = vec![usize::MAX; coords.len()];
        let mut kept = Vec::new();
        for el in &mut elements {
            for n in &mut el.nodes {
                if remap[*n] == usize::MAX {
                    remap[*n] = kept.len();
                    kept.push(coords[*n]);
                }
                *n = remap[*n];
            }
        }
        // restore a geometric node order so the natural numbering stays banded
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| {
            kept[a][1].total_cmp(&kept[b][1]).then(kept[a][0].total_cmp(&kept[b][0]))
        });
        let mut pos = vec![0; kept.len()];
        for (p, &o) in order.iter().enumerate() {
            pos[o] = p;
        }
        let coords = order.iter().map(|&o| kept[o]).collect();
        for el in &mut elements {
            for n in &mut el.nodes {
                *n = pos[*n];
            }
        }
        Mesh::new(2, coords, elements, BTreeMap::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    pub fn elements(&self) -> &[Element] {
        &self.elements
    }

    pub fn element(&self, e: usize) -> &Element {
        &self.elements[e]
    }

    pub fn centroids(&self) -> &[Point] {
        &self.centroids
    }

    pub fn dirichlet(&self) -> &BTreeMap<usize, f64> {
        &self.dirichlet
    }

    pub fn neumann(&self) -> &[Vec<usize>] {
        &self.neumann
    }

    pub fn set_dirichlet(&mut self, node: usize, value: f64) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(Error::InvalidMesh(format!("Dirichlet node {node} does not exist")));
        }
        self.dirichlet.insert(node, value);
        Ok(())
    }

    /// Prescribes `value` on every node whose coordinates satisfy `pred`.
    /// Returns the number of constrained nodes.
    pub fn set_dirichlet_where(&mut self, value: f64, pred: impl Fn(Point) -> bool) -> usize {
        let mut count = 0;
        for (n, &x) in self.coords.iter().enumerate() {
            if pred(x) {
                self.dirichlet.insert(n, value);
                count += 1;
            }
        }
        count
    }

    /// Records the boundary facets matching `pred` (all facet nodes must
    /// satisfy it) as zero-flux Neumann facets.
    pub fn mark_neumann_where(&mut self, pred: impl Fn(Point) -> bool) {
        let facets = self.select_boundary(pred);
        self.neumann = facets.into_iter().map(|f| f.nodes).collect();
    }

    /// Length of a segment or area of a 2D element.
    pub fn element_measure(&self, e: usize) -> f64 {
        let el = &self.elements[e];
        let x = |k: usize| self.coords[el.nodes[k]];
        match el.kind {
            ElementKind::Segment2 => x(1)[0] - x(0)[0],
            ElementKind::Triangle3 => 0.5 * cross(x(0), x(1), x(2)).abs(),
            ElementKind::Quad4 => {
                // shoelace; the quadrature in the FEM additionally checks det J
                let mut s = 0.0;
                for k in 0..4 {
                    let a = x(k);
                    let b = x((k + 1) % 4);
                    s += a[0] * b[1] - b[0] * a[1];
                }
                0.5 * s.abs()
            }
        }
        .abs()
    }

    /// Facets that belong to exactly one element.
    pub fn boundary_facets(&self) -> Vec<BoundaryFacet> {
        let mut seen: HashMap<Vec<usize>, (usize, Vec<usize>, usize)> = HashMap::new();
        for (e, el) in self.elements.iter().enumerate() {
            for local in el.kind.facets() {
                let nodes: Vec<usize> = local.iter().map(|&k| el.nodes[k]).collect();
                let mut key = nodes.clone();
                key.sort_unstable();
                seen.entry(key).and_modify(|v| v.2 += 1).or_insert((e, nodes, 1));
            }
        }
        let mut out: Vec<BoundaryFacet> = seen
            .into_values()
            .filter(|v| v.2 == 1)
            .map(|(element, nodes, _)| BoundaryFacet { nodes, element })
            .collect();
        out.sort_by(|a, b| a.element.cmp(&b.element).then(a.nodes.cmp(&b.nodes)));
        out
    }

    /// Boundary facets whose nodes all satisfy `pred`.
    pub fn select_boundary(&self, pred: impl Fn(Point) -> bool) -> Vec<BoundaryFacet> {
        self.boundary_facets()
            .into_iter()
            .filter(|f| f.nodes.iter().all(|&n| pred(self.coords[n])))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("NODES\n");
        for (i, x) in self.coords.iter().enumerate() {
            if self.dim == 1 {
                let _ = writeln!(s, "{i} {:?}", x[0]);
            } else {
                let _ = writeln!(s, "{i} {:?} {:?}", x[0], x[1]);
            }
        }
        s.push_str("ELEMENTS\n");
        for (i, el) in self.elements.iter().enumerate() {
            let _ = write!(s, "{i} {}", el.kind.keyword());
            for n in &el.nodes {
                let _ = write!(s, " {n}");
            }
            s.push('\n');
        }
        s.push_str("DIRICHLET\n");
        for (n, v) in &self.dirichlet {
            let _ = writeln!(s, "{n} {v:?}");
        }
        if !self.neumann.is_empty() {
            s.push_str("NEUMANN\n");
            for f in &self.neumann {
                let line: Vec<String> = f.iter().map(|n| n.to_string()).collect();
                let _ = writeln!(s, "{}", line.join(" "));
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Nodes,
            Elements,
            Dirichlet,
            Neumann,
        }
        let mut section = Section::None;
        let mut coords = Vec::new();
        let mut dim = 0;
        let mut elements = Vec::new();
        let mut dirichlet = BTreeMap::new();
        let mut neumann = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: ln + 1, msg };
            match line {
                "NODES" => {
                    section = Section::Nodes;
                    continue;
                }
                "ELEMENTS" => {
                    section = Section::Elements;
                    continue;
                }
                "DIRICHLET" => {
                    section = Section::Dirichlet;
                    continue;
                }
                "NEUMANN" => {
                    section = Section::Neumann;
                    continue;
                }
                _ => {}
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let idx = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            match section {
                Section::None => return Err(err("data before the first section header".into())),
                Section::Nodes => {
                    let i = idx(fields[0])?;
                    if i != coords.len() {
                        return Err(err(format!("node index {i} out of sequence")));
                    }
                    let d = fields.len() - 1;
                    if dim == 0 {
                        dim = d;
                    }
                    if d != dim || !(1..=2).contains(&d) {
                        return Err(err(format!("node {i} has {d} coordinates")));
                    }
                    let y = if d == 2 { num(fields[2])? } else { 0.0 };
                    coords.push([num(fields[1])?, y]);
                }
                Section::Elements => {
                    if fields.len() < 3 {
                        return Err(err("element line needs index, kind and nodes".into()));
                    }
                    let i = idx(fields[0])?;
                    if i != elements.len() {
                        return Err(err(format!("element index {i} out of sequence")));
                    }
                    let kind = ElementKind::from_keyword(fields[1])
                        .ok_or_else(|| err(format!("unknown element kind {:?}", fields[1])))?;
                    let nodes = fields[2..].iter().map(|s| idx(s)).collect::<Result<Vec<_>>>()?;
                    elements.push(Element::new(kind, nodes));
                }
                Section::Dirichlet => {
                    if fields.len() != 2 {
                        return Err(err("Dirichlet line must be `node value`".into()));
                    }
                    dirichlet.insert(idx(fields[0])?, num(fields[1])?);
                }
                Section::Neumann => {
                    neumann.push(fields.iter().map(|s| idx(s)).collect::<Result<Vec<_>>>()?);
                }
            }
        }
        let mut mesh = Mesh::new(dim, coords, elements, dirichlet)?;
        mesh.neumann = neumann;
        Ok(mesh)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
}
