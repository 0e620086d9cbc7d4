//! Layered polygon annotations in level-0 slide coordinates.

use std::collections::{BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::geometry::{ring_is_simple, round2, Point};

mod raster;
mod training;
mod xml;

pub use raster::{rasterize, rasterize_layers_window, rasterize_window};
pub use training::{
    export_training_patches, ManifestEntry, PatchExportOptions, TrainingManifest,
    DEFAULT_PATCH_SIZE,
};
pub use xml::{from_xml, from_xml_with_warnings, to_xml};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Predicted,
    #[default]
    Human,
    Imported,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    #[default]
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonElement {
    pub id: String,
    #[serde(rename = "type", default)]
    pub kind: ElementKind,
    #[serde(rename = "points")]
    pub exterior: Vec<Point>,
    #[serde(default)]
    pub holes: Vec<Vec<Point>>,
    #[serde(default)]
    pub source: Source,
    #[serde(default)]
    pub negative: bool,
}

impl PolygonElement {
    pub fn new(id: impl Into<String>, exterior: Vec<Point>, holes: Vec<Vec<Point>>, source: Source) -> Self {
        PolygonElement {
            id: id.into(),
            kind: ElementKind::Polygon,
            exterior,
            holes,
            source,
            negative: false,
        }
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<Point>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }

    fn round_coordinates(&mut self) {
        for p in self.exterior.iter_mut().chain(self.holes.iter_mut().flatten()) {
            *p = p.rounded();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLayer {
    pub name: String,
    pub class_id: u8,
    pub line_color: [u8; 3],
    #[serde(default)]
    pub elements: Vec<PolygonElement>,
}

impl AnnotationLayer {
    pub fn new(name: impl Into<String>, class_id: u8, line_color: [u8; 3]) -> Self {
        AnnotationLayer {
            name: name.into(),
            class_id,
            line_color,
            elements: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub slide_id: String,
    #[serde(default)]
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub layers: Vec<AnnotationLayer>,
}

/// Default line colors, cycled by class id.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 255, 0],
    [255, 0, 0],
    [0, 0, 255],
    [255, 255, 0],
    [0, 255, 255],
    [255, 0, 255],
];

pub fn default_color(class_id: u8) -> [u8; 3] {
    PALETTE[(class_id.max(1) as usize - 1) % PALETTE.len()]
}

/// A single change to a document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Edit {
    Add {
        layer: String,
        points: Vec<Point>,
        #[serde(default)]
        holes: Vec<Vec<Point>>,
        #[serde(default)]
        negative: bool,
    },
    Delete {
        id: String,
    },
    Replace {
        id: String,
        points: Vec<Point>,
        #[serde(default)]
        holes: Vec<Vec<Point>>,
    },
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

/// Rejects rings that are not closed simple polygons with at least three vertices.
pub fn check_ring(ring: &[Point]) -> Result<()> {
    if ring.len() < 3 {
        return Err(Error::InvalidPolygon(format!("ring has {} vertices; at least 3 required", ring.len())));
    }
    if ring.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::InvalidPolygon("non-finite coordinate".into()));
    }
    if !ring_is_simple(ring) {
        return Err(Error::InvalidPolygon("ring is self-intersecting".into()));
    }
    Ok(())
}

impl AnnotationDocument {
    pub fn new(slide_id: impl Into<String>) -> Self {
        AnnotationDocument {
            slide_id: slide_id.into(),
            revision: 0,
            modified_at: None,
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, name: &str) -> Option<&AnnotationLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut AnnotationLayer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn element_count(&self) -> usize {
        self.layers.iter().map(|l| l.elements.len()).sum()
    }

    /// Label count needed to rasterize this document (max class id + 1).
    pub fn class_count(&self) -> u8 {
        self.layers.iter().map(|l| l.class_id).max().unwrap_or(0).saturating_add(1).max(2)
    }

    /// Structural checks: unique layer names and class ids, unique element
    /// ids, rings of at least three finite vertices.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut classes = HashSet::new();
        let mut ids = HashSet::new();
        for (li, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(schema(format!("layers[{li}].name"), format!("duplicate layer name {:?}", layer.name)));
            }
            if layer.class_id == 0 {
                return Err(schema(format!("layers[{li}].class_id"), "class_id must be >= 1"));
            }
            if !classes.insert(layer.class_id) {
                return Err(schema(
                    format!("layers[{li}].class_id"),
                    format!("duplicate class_id {}", layer.class_id),
                ));
            }
            for (ei, e) in layer.elements.iter().enumerate() {
                let at = format!("layers[{li}].elements[{ei}]");
                if !ids.insert(e.id.as_str()) {
                    return Err(schema(format!("{at}.id"), format!("duplicate element id {:?}", e.id)));
                }
                for (ri, ring) in e.rings().enumerate() {
                    let field = if ri == 0 {
                        format!("{at}.points")
                    } else {
                        format!("{at}.holes[{}]", ri - 1)
                    };
                    if ring.len() < 3 {
                        return Err(schema(field, format!("ring has {} vertices; at least 3 required", ring.len())));
                    }
                    if ring.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
                        return Err(schema(field, "non-finite coordinate"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("document serializes")
    }

    pub fn to_json_pretty(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("document serializes")
    }

    /// Parses and validates a document. Unknown fields are reported in the
    /// returned warnings and otherwise ignored.
    pub fn from_json_with_warnings(bytes: &[u8]) -> Result<(Self, Vec<String>)> {
        let mut warnings = Vec::new();
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let mut on_unknown = |path: serde_ignored::Path| warnings.push(format!("unknown field {path}"));
        let tracked = serde_ignored::Deserializer::new(de, &mut on_unknown);
        let mut doc: AnnotationDocument = serde_path_to_error::deserialize(tracked).map_err(|e| {
            let path = e.path().to_string();
            schema(path, e.into_inner().to_string())
        })?;
        doc.validate()?;
        for e in doc.layers.iter_mut().flat_map(|l| l.elements.iter_mut()) {
            e.round_coordinates();
        }
        Ok((doc, warnings))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let (doc, warnings) = Self::from_json_with_warnings(bytes)?;
        for w in warnings {
            warn!("{w}");
        }
        Ok(doc)
    }

    fn next_id(&self) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| l.elements.iter())
            .filter_map(|e| e.id.strip_prefix('e').and_then(|n| n.parse::<u64>().ok()))
            .max()
            .map_or(1, |m| m + 1)
    }

    fn find(&self, id: &str) -> Option<(usize, usize)> {
        self.layers.iter().enumerate().find_map(|(li, l)| {
            l.elements.iter().position(|e| e.id == id).map(|ei| (li, ei))
        })
    }

    /// Applies one edit, returning the new document with `revision + 1`.
    /// Added and replaced geometry is marked as human-made.
    pub fn apply_edit(&self, edit: &Edit) -> Result<Self> {
        let mut doc = self.clone();
        match edit {
            Edit::Add {
                layer,
                points,
                holes,
                negative,
            } => {
                let mut e = PolygonElement::new(format!("e{}", doc.next_id()), points.clone(), holes.clone(), Source::Human);
                e.negative = *negative;
                e.round_coordinates();
                e.rings().try_for_each(|r| check_ring(r))?;
                doc.layer_mut(layer)
                    .ok_or_else(|| Error::UnknownLayer(layer.clone()))?
                    .elements
                    .push(e);
            }
            Edit::Delete { id } => {
                let (li, ei) = doc.find(id).ok_or_else(|| Error::UnknownElement(id.clone()))?;
                doc.layers[li].elements.remove(ei);
            }
            Edit::Replace { id, points, holes } => {
                let (li, ei) = doc.find(id).ok_or_else(|| Error::UnknownElement(id.clone()))?;
                let e = &mut doc.layers[li].elements[ei];
                e.exterior = points.clone();
                e.holes = holes.clone();
                e.source = Source::Human;
                e.round_coordinates();
                e.rings().try_for_each(|r| check_ring(r))?;
            }
        }
        doc.revision += 1;
        doc.modified_at = Some(Utc::now());
        Ok(doc)
    }

    /// Merges predicted layers: a layer with the same name keeps its human
    /// and imported elements and has its predicted elements replaced; a new
    /// layer whose class id is already taken gets the next free id.
    pub fn merge_predictions(&self, predicted: &[AnnotationLayer]) -> Result<Self> {
        let mut doc = self.clone();
        let mut next = doc.next_id();
        for p in predicted {
            let fresh: Vec<PolygonElement> = p
                .elements
                .iter()
                .map(|e| {
                    let mut e = e.clone();
                    e.id = format!("e{next}");
                    e.source = Source::Predicted;
                    e.round_coordinates();
                    next += 1;
                    e
                })
                .collect();
            match doc.layer_mut(&p.name) {
                Some(layer) => {
                    layer.elements.retain(|e| e.source != Source::Predicted);
                    layer.elements.extend(fresh);
                }
                None => {
                    let used: BTreeSet<u8> = doc.layers.iter().map(|l| l.class_id).collect();
                    let class_id = if p.class_id != 0 && !used.contains(&p.class_id) {
                        p.class_id
                    } else {
                        (1..=u8::MAX)
                            .find(|c| !used.contains(c))
                            .ok_or_else(|| Error::InvalidParam("no free class id".into()))?
                    };
                    doc.layers.push(AnnotationLayer {
                        name: p.name.clone(),
                        class_id,
                        line_color: p.line_color,
                        elements: fresh,
                    });
                }
            }
        }
        doc.revision += 1;
        doc.modified_at = Some(Utc::now());
        Ok(doc)
    }

    /// Geometry-only view used to compare documents across formats: layer
    /// name, class, color, and per element its rings and negativity.
    #[allow(clippy::type_complexity)]
    pub fn geometry_key(&self) -> Vec<(String, [u8; 3], Vec<(Vec<[f64; 2]>, Vec<Vec<[f64; 2]>>, bool)>)> {
        let key = |r: &Vec<Point>| r.iter().map(|p| [round2(p.x), round2(p.y)]).collect::<Vec<_>>();
        self.layers
            .iter()
            .map(|l| {
                (
                    l.name.clone(),
                    l.line_color,
                    l.elements
                        .iter()
                        .map(|e| (key(&e.exterior), e.holes.iter().map(key).collect(), e.negative))
                        .collect(),
                )
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    pub(crate) fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    pub(crate) fn triangle_doc() -> AnnotationDocument {
        let mut doc = AnnotationDocument::new("s1");
        let mut layer = AnnotationLayer::new("glomerulus", 1, [0, 255, 0]);
        layer.elements.push(PolygonElement::new(
            "e1",
            pts(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)]),
            vec![],
            Source::Predicted,
        ));
        doc.layers.push(layer);
        doc
    }

    /// Random star-shaped polygon around (cx, cy), optionally with a hole.
    pub(crate) fn random_element(rng: &mut impl Rng, id: String, cx: f64, cy: f64, r: f64) -> PolygonElement {
        let n = rng.gen_range(6..24);
        let ring = |rng: &mut dyn rand::RngCore, scale: f64, n: usize| -> Vec<Point> {
            let mut angles: Vec<f64> = (0..n).map(|k| (k as f64 + rng.gen_range(0.1..0.9)) / n as f64).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
            angles
                .into_iter()
                .map(|t| {
                    let a = t * std::f64::consts::TAU;
                    let rr = scale * rng.gen_range(0.6..1.0);
                    Point::new(round2(cx + rr * a.cos()), round2(cy + rr * a.sin()))
                })
                .collect()
        };
        let exterior = ring(rng, r, n);
        let holes = if rng.gen_bool(0.3) {
            vec![ring(rng, r * 0.3, 3 + n % 5).into_iter().rev().collect()]
        } else {
            vec![]
        };
        let source = [Source::Predicted, Source::Human, Source::Imported][rng.gen_range(0..3)];
        PolygonElement::new(id, exterior, holes, source)
    }

    pub(crate) fn random_doc(rng: &mut impl Rng, layers: usize, per_layer: usize) -> AnnotationDocument {
        let mut doc = AnnotationDocument::new(format!("slide-{}", rng.gen::<u16>()));
        doc.revision = rng.gen_range(0..100);
        let mut id = 1;
        for li in 0..layers {
            let mut layer = AnnotationLayer::new(format!("layer {li}"), li as u8 + 1, [rng.gen(), rng.gen(), rng.gen()]);
            for k in 0..per_layer {
                // disjoint grid cells keep polygons apart
                let cell = (li * per_layer + k) as f64;
                let (cx, cy) = (100.0 + (cell % 40.0) * 100.0 + rng.gen_range(-5.0..5.0), 100.0 + (cell / 40.0).floor() * 100.0);
                layer.elements.push(random_element(rng, format!("e{id}"), cx, cy, 40.0));
                id += 1;
            }
            doc.layers.push(layer);
        }
        doc
    }

    #[test]
    fn empty_doc_json() {
        let doc = AnnotationDocument::new("abc");
        assert_eq!(
            String::from_utf8(doc.to_json()).unwrap(),
            r#"{"slide_id":"abc","revision":0,"layers":[]}"#
        );
    }

    #[test]
    fn triangle_json_round_trip() {
        let doc = triangle_doc();
        let text = String::from_utf8(doc.to_json()).unwrap();
        assert!(text.contains(r#""points":[[0.0,0.0],[10.0,0.0],[0.0,10.0]]"#));
        assert!(text.contains(r#""type":"polygon""#));
        assert_eq!(AnnotationDocument::from_json(text.as_bytes()).unwrap(), doc);
    }

    #[test]
    fn coordinates_serialize_with_two_decimals() {
        let mut doc = triangle_doc();
        doc.layers[0].elements[0].exterior[1] = Point::new(10.123456, 0.004);
        let back = AnnotationDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back.layers[0].elements[0].exterior[1], Point::new(10.12, 0.0));
    }

    #[test]
    fn random_docs_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let doc = random_doc(&mut rng, 2, 100);
            assert_eq!(AnnotationDocument::from_json(&doc.to_json()).unwrap(), doc);
        }
    }

    #[test]
    fn schema_errors_carry_paths() {
        let bad = br#"{"slide_id":"s","revision":0,"layers":[{"name":"a","class_id":1,"line_color":[0,0,0],"elements":[{"id":"e1","type":"polygon","points":[[0,0],[1,"x"]]}]}]}"#;
        match AnnotationDocument::from_json(bad) {
            Err(Error::Schema { path, .. }) => assert!(path.starts_with("layers[0].elements[0].points[1]"), "{path}"),
            other => panic!("{other:?}"),
        }
        let two = br#"{"slide_id":"s","layers":[{"name":"a","class_id":1,"line_color":[0,0,0],"elements":[{"id":"e1","points":[[0,0],[1,1]]}]}]}"#;
        match AnnotationDocument::from_json(two) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "layers[0].elements[0].points"),
            other => panic!("{other:?}"),
        }
        let dup = br#"{"slide_id":"s","layers":[{"name":"a","class_id":1,"line_color":[0,0,0]},{"name":"a","class_id":2,"line_color":[0,0,0]}]}"#;
        assert!(matches!(AnnotationDocument::from_json(dup), Err(Error::Schema { .. })));
    }

    #[test]
    fn unknown_fields_warn() {
        let text = br#"{"slide_id":"s","revision":3,"extra":1,"layers":[{"name":"a","class_id":1,"line_color":[1,2,3],"opacity":0.5}]}"#;
        let (doc, warnings) = AnnotationDocument::from_json_with_warnings(text).unwrap();
        assert_eq!(doc.revision, 3);
        assert_eq!(warnings.len(), 2, "{warnings:?}");
    }

    #[test]
    fn edits() {
        let doc = triangle_doc();
        let gone = doc.apply_edit(&Edit::Delete { id: "e1".into() }).unwrap();
        assert!(gone.layers[0].elements.is_empty());
        assert_eq!(gone.revision, doc.revision + 1);

        let added = doc
            .apply_edit(&Edit::Add {
                layer: "glomerulus".into(),
                points: pts(&[(20.0, 20.0), (30.0, 20.0), (20.0, 30.0)]),
                holes: vec![],
                negative: false,
            })
            .unwrap();
        let e = &added.layers[0].elements[1];
        assert_eq!(e.source, Source::Human);
        assert_eq!(e.id, "e2");

        let two = doc.apply_edit(&Edit::Replace {
            id: "e1".into(),
            points: pts(&[(0.0, 0.0), (1.0, 1.0)]),
            holes: vec![],
        });
        assert!(matches!(two, Err(Error::InvalidPolygon(_))));
        let bow = doc.apply_edit(&Edit::Replace {
            id: "e1".into(),
            points: pts(&[(0.0, 0.0), (10.0, 10.0), (10.0, 0.0), (0.0, 10.0)]),
            holes: vec![],
        });
        assert!(matches!(bow, Err(Error::InvalidPolygon(_))));
        assert!(matches!(doc.apply_edit(&Edit::Delete { id: "nope".into() }), Err(Error::UnknownElement(_))));
        let replaced = doc
            .apply_edit(&Edit::Replace {
                id: "e1".into(),
                points: pts(&[(0.0, 0.0), (5.0, 0.0), (0.0, 5.0)]),
                holes: vec![],
            })
            .unwrap();
        assert_eq!(replaced.layers[0].elements[0].source, Source::Human);
    }

    #[test]
    fn merge_replaces_only_predictions() {
        let doc = triangle_doc()
            .apply_edit(&Edit::Add {
                layer: "glomerulus".into(),
                points: pts(&[(20.0, 20.0), (30.0, 20.0), (20.0, 30.0)]),
                holes: vec![],
                negative: false,
            })
            .unwrap();
        let mut pred = AnnotationLayer::new("glomerulus", 1, [0, 255, 0]);
        pred.elements.push(PolygonElement::new(
            "e1",
            pts(&[(50.0, 50.0), (60.0, 50.0), (50.0, 60.0)]),
            vec![],
            Source::Predicted,
        ));
        let mut other = AnnotationLayer::new("vessel", 1, [255, 0, 0]);
        other.elements = pred.elements.clone();
        let merged = doc.merge_predictions(&[pred, other]).unwrap();
        merged.validate().unwrap();
        let g = merged.layer("glomerulus").unwrap();
        assert_eq!(g.elements.len(), 2);
        assert_eq!(g.elements[0].source, Source::Human);
        assert_eq!(g.elements[1].exterior[0], Point::new(50.0, 50.0));
        assert_eq!(merged.layer("vessel").unwrap().class_id, 2);
        assert_eq!(merged.revision, doc.revision + 1);
    }
}
