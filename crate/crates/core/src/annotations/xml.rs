//! ImageScope-style XML.
//!
//! ```text
//! <Annotations SlideId="...">
//!   <Annotation Id="1" Name="glomerulus" LineColor="65280">
//!     <Regions>
//!       <Region Id="1" NegativeROA="0"><Vertices><Vertex X=".." Y=".."/>...</Vertices></Region>
//! ```
//!
//! `LineColor` packs a color as `B*65536 + G*256 + R`. Holes are written as
//! separate regions with `NegativeROA="1"` right after their exterior.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use quick_xml::escape::escape;
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use tracing::warn;

use super::{AnnotationDocument, AnnotationLayer, PolygonElement, Source};
use crate::error::{Error, Result};
use crate::geometry::{round2, signed_area2, Point};

pub fn encode_line_color([r, g, b]: [u8; 3]) -> u32 {
    b as u32 * 65536 + g as u32 * 256 + r as u32
}

pub fn decode_line_color(v: u32) -> [u8; 3] {
    [(v & 0xff) as u8, ((v >> 8) & 0xff) as u8, ((v >> 16) & 0xff) as u8]
}

fn write_region(out: &mut String, id: usize, ring: &[Point], negative: bool) {
    let _ = writeln!(
        out,
        r#"      <Region Id="{id}" Type="0" NegativeROA="{}">"#,
        negative as u8
    );
    out.push_str("        <Attributes/>\n        <Vertices>\n");
    for p in ring {
        let _ = writeln!(out, r#"          <Vertex X="{}" Y="{}" Z="0"/>"#, round2(p.x), round2(p.y));
    }
    out.push_str("        </Vertices>\n      </Region>\n");
}

pub fn to_xml(doc: &AnnotationDocument) -> Vec<u8> {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(out, r#"<Annotations SlideId="{}">"#, escape(doc.slide_id.as_str()));
    for layer in &doc.layers {
        let _ = writeln!(
            out,
            r#"  <Annotation Id="{}" Name="{}" ReadOnly="0" LineColor="{}" Visible="1">"#,
            layer.class_id,
            escape(layer.name.as_str()),
            encode_line_color(layer.line_color)
        );
        out.push_str("    <Attributes/>\n    <Regions>\n      <RegionAttributeHeaders/>\n");
        let mut region_id = 1;
        for e in &layer.elements {
            write_region(&mut out, region_id, &e.exterior, e.negative);
            region_id += 1;
            for h in &e.holes {
                write_region(&mut out, region_id, h, true);
                region_id += 1;
            }
        }
        out.push_str("    </Regions>\n    <Plots/>\n  </Annotation>\n");
    }
    out.push_str("</Annotations>\n");
    out.into_bytes()
}

struct RawRegion {
    negative: bool,
    ring: Vec<Point>,
}

struct RawLayer {
    id: Option<u32>,
    name: Option<String>,
    color: u32,
    regions: Vec<RawRegion>,
}

fn line_of(bytes: &[u8], pos: u64) -> usize {
    let end = (pos as usize).min(bytes.len());
    bytes[..end].iter().filter(|&&b| b == b'\n').count() + 1
}

fn attr(bytes: &[u8], pos: u64, e: &BytesStart, name: &[u8]) -> Result<Option<String>> {
    for a in e.attributes() {
        let a = a.map_err(|err| Error::Xml {
            line: line_of(bytes, pos),
            message: err.to_string(),
        })?;
        if a.key.as_ref() == name {
            let v = a.unescape_value().map_err(|err| Error::Xml {
                line: line_of(bytes, pos),
                message: err.to_string(),
            })?;
            return Ok(Some(v.into_owned()));
        }
    }
    Ok(None)
}

fn parse_num<T: std::str::FromStr>(bytes: &[u8], pos: u64, what: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Xml {
        line: line_of(bytes, pos),
        message: format!("invalid {what} {v:?}"),
    })
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    cross.abs() <= 1e-9 * (1.0 + (b.x - a.x).abs() + (b.y - a.y).abs())
        && p.x >= a.x.min(b.x) - 1e-9
        && p.x <= a.x.max(b.x) + 1e-9
        && p.y >= a.y.min(b.y) - 1e-9
        && p.y <= a.y.max(b.y) + 1e-9
}

/// Inside or on the boundary of a closed ring.
fn covers(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    (0..n).any(|i| on_segment(p, ring[i], ring[(i + 1) % n])) || crate::geometry::point_in_ring(p, ring)
}

/// Splits regions into elements in document order: positives collect the
/// negatives they cover as holes, other negatives stay standalone.
fn assemble_layer(raw: RawLayer, warnings: &mut Vec<String>) -> Vec<PolygonElement> {
    let mut slots: Vec<(usize, PolygonElement)> = Vec::new();
    let mut negatives: Vec<(usize, Vec<Point>)> = Vec::new();
    for (i, r) in raw.regions.into_iter().enumerate() {
        if r.negative {
            negatives.push((i, r.ring));
        } else {
            slots.push((i, PolygonElement::new(String::new(), r.ring, vec![], Source::Imported)));
        }
    }
    let positives = slots.len();
    let mut standalone = 0;
    for (i, ring) in negatives {
        // attach to the smallest positive region that covers every vertex
        let host = slots[..positives]
            .iter()
            .enumerate()
            .filter(|(_, (_, p))| ring.iter().all(|&v| covers(&p.exterior, v)))
            .min_by(|a, b| {
                signed_area2(&a.1 .1.exterior)
                    .abs()
                    .partial_cmp(&signed_area2(&b.1 .1.exterior).abs())
                    .unwrap()
            })
            .map(|(k, _)| k);
        match host {
            Some(k) => slots[k].1.holes.push(ring),
            None => {
                let mut e = PolygonElement::new(String::new(), ring, vec![], Source::Imported);
                e.negative = true;
                slots.push((i, e));
                standalone += 1;
            }
        }
    }
    if standalone > 0 {
        let name = raw.name.as_deref().unwrap_or("?");
        warnings.push(format!(
            "{standalone} negative region(s) in {name:?} lie outside every positive region; kept as negative elements"
        ));
    }
    slots.sort_by_key(|(i, _)| *i);
    slots.into_iter().map(|(_, e)| e).collect()
}

/// Parses ImageScope-style XML. `default_slide_id` is used when the root
/// element has no `SlideId` attribute.
pub fn from_xml_with_warnings(bytes: &[u8], default_slide_id: &str) -> Result<(AnnotationDocument, Vec<String>)> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().trim_text(true);
    let mut warnings = Vec::new();
    let mut slide_id = default_slide_id.to_string();
    let mut layers: Vec<RawLayer> = Vec::new();
    let mut current: Option<RawLayer> = None;
    // (negative, vertices) of the region being read; vertices stay None
    // until a <Vertices> element shows up
    let mut region: Option<(bool, Option<Vec<Point>>, usize)> = None;
    let mut buf = Vec::new();
    loop {
        let event = reader.read_event_into(&mut buf).map_err(|e| Error::Xml {
            line: line_of(bytes, reader.error_position()),
            message: e.to_string(),
        })?;
        // end of the event just read; lines are reported where a tag closes
        let pos = reader.buffer_position().saturating_sub(1);
        let empty = matches!(event, Event::Empty(_));
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => match e.local_name().as_ref() {
                b"Annotations" => {
                    if let Some(id) = attr(bytes, pos, e, b"SlideId")? {
                        slide_id = id;
                    }
                }
                b"Annotation" => {
                    let id = attr(bytes, pos, e, b"Id")?.and_then(|v| v.trim().parse().ok());
                    let name = attr(bytes, pos, e, b"Name")?;
                    let color = match attr(bytes, pos, e, b"LineColor")? {
                        Some(v) => parse_num(bytes, pos, "LineColor", &v)?,
                        None => 0,
                    };
                    let raw = RawLayer {
                        id,
                        name,
                        color,
                        regions: Vec::new(),
                    };
                    if empty {
                        layers.push(raw);
                    } else {
                        current = Some(raw);
                    }
                }
                b"Region" => {
                    let negative = attr(bytes, pos, e, b"NegativeROA")?.is_some_and(|v| v.trim() == "1");
                    if empty {
                        warnings.push(format!("region at line {} has no vertices; skipped", line_of(bytes, pos)));
                    } else {
                        region = Some((negative, None, line_of(bytes, pos)));
                    }
                }
                b"Vertices" => {
                    if let Some((_, v, _)) = region.as_mut() {
                        v.get_or_insert_with(Vec::new);
                    }
                }
                b"Vertex" => {
                    let x = attr(bytes, pos, e, b"X")?;
                    let y = attr(bytes, pos, e, b"Y")?;
                    let (Some(x), Some(y)) = (x, y) else {
                        return Err(Error::Xml {
                            line: line_of(bytes, pos),
                            message: "Vertex without X or Y".into(),
                        });
                    };
                    let p = Point::new(parse_num(bytes, pos, "X", &x)?, parse_num(bytes, pos, "Y", &y)?);
                    if let Some((_, Some(v), _)) = region.as_mut() {
                        v.push(p.rounded());
                    }
                }
                _ => {}
            },
            Event::End(ref e) => match e.local_name().as_ref() {
                b"Region" => match region.take() {
                    Some((negative, Some(ring), line)) => {
                        if ring.len() < 3 {
                            warnings.push(format!("region at line {line} has {} vertices; skipped", ring.len()));
                        } else if let Some(l) = current.as_mut() {
                            l.regions.push(RawRegion { negative, ring });
                        }
                    }
                    Some((_, None, line)) => {
                        warnings.push(format!("region at line {line} has no vertices; skipped"));
                    }
                    None => {}
                },
                b"Annotation" => {
                    if let Some(l) = current.take() {
                        layers.push(l);
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    let mut doc = AnnotationDocument::new(slide_id);
    let mut used_ids = BTreeSet::new();
    let mut used_names = BTreeSet::new();
    let mut next_element = 1u64;
    // explicit ids first so a later duplicate cannot steal one
    let requested: Vec<Option<u8>> = layers
        .iter()
        .map(|l| l.id.and_then(|i| u8::try_from(i).ok()).filter(|&i| i > 0))
        .collect();
    for raw in layers {
        let want = raw.id.and_then(|i| u8::try_from(i).ok()).filter(|&i| i > 0);
        let class_id = match want {
            Some(i) if !used_ids.contains(&i) => i,
            _ => (1..=u8::MAX)
                .find(|c| !used_ids.contains(c) && !requested.contains(&Some(*c)))
                .or_else(|| (1..=u8::MAX).find(|c| !used_ids.contains(c)))
                .ok_or_else(|| Error::Xml {
                    line: 0,
                    message: "more than 255 annotations".into(),
                })?,
        };
        used_ids.insert(class_id);
        let base = raw.name.clone().unwrap_or_else(|| format!("Layer {class_id}"));
        let mut name = base.clone();
        let mut k = 2;
        while !used_names.insert(name.clone()) {
            name = format!("{base} ({k})");
            k += 1;
        }
        let color = decode_line_color(raw.color);
        let mut layer = AnnotationLayer::new(name, class_id, color);
        for mut e in assemble_layer(raw, &mut warnings) {
            e.id = format!("e{next_element}");
            next_element += 1;
            layer.elements.push(e);
        }
        doc.layers.push(layer);
    }
    doc.validate()?;
    Ok((doc, warnings))
}

pub fn from_xml(bytes: &[u8], default_slide_id: &str) -> Result<AnnotationDocument> {
    let (doc, warnings) = from_xml_with_warnings(bytes, default_slide_id)?;
    for w in warnings {
        warn!("{w}");
    }
    Ok(doc)
}
