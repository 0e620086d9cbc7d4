use super::{AnnotationDocument, AnnotationLayer};
use crate::backend::LabelMask;
use crate::components::PixelBox;
use crate::error::{Error, Result};
use crate::geometry::{bounds, fill_polygon, Point};
use crate::pyramid::{level_extent, PyramidMeta};

/// Paints `layers` in order into `out`, a row-major raster covering `window`
/// of the given level. Later layers overwrite earlier ones; negative elements
/// clear their own layer's class.
pub fn rasterize_layers_window(layers: &[&AnnotationLayer], level: u32, window: PixelBox, out: &mut [u8]) {
    let scale = 1.0 / (1u64 << level) as f64;
    let w = window.width() as usize;
    debug_assert_eq!(out.len(), w * window.height() as usize);
    for layer in layers {
        let class = layer.class_id;
        for negative_pass in [false, true] {
            for e in layer.elements.iter().filter(|e| e.negative == negative_pass) {
                let Some((lo, hi)) = bounds(&e.exterior) else { continue };
                if hi.x * scale < window.x0 as f64
                    || hi.y * scale < window.y0 as f64
                    || lo.x * scale > window.x1 as f64
                    || lo.y * scale > window.y1 as f64
                {
                    continue;
                }
                let rings: Vec<&[Point]> = e.rings().map(|r| r.as_slice()).collect();
                fill_polygon(&rings, scale, window, |y, x0, x1| {
                    let row = (y - window.y0) as usize * w;
                    let span = &mut out[row + (x0 - window.x0) as usize..row + (x1 - window.x0) as usize];
                    if negative_pass {
                        span.iter_mut().filter(|v| **v == class).for_each(|v| *v = 0);
                    } else {
                        span.fill(class);
                    }
                });
            }
        }
    }
}

fn select<'a>(doc: &'a AnnotationDocument, layers: Option<&[&str]>) -> Result<Vec<&'a AnnotationLayer>> {
    match layers {
        None => Ok(doc.layers.iter().collect()),
        Some(names) => {
            for n in names {
                if doc.layer(n).is_none() {
                    return Err(Error::UnknownLayer(n.to_string()));
                }
            }
            // document order decides overwrite precedence
            Ok(doc.layers.iter().filter(|l| names.contains(&l.name.as_str())).collect())
        }
    }
}

/// Class raster of `window` (in level coordinates) for the selected layers,
/// or all layers when `layers` is `None`.
pub fn rasterize_window(
    doc: &AnnotationDocument,
    level: u32,
    layers: Option<&[&str]>,
    window: PixelBox,
) -> Result<Vec<u8>> {
    let selected = select(doc, layers)?;
    let mut out = vec![0u8; window.area() as usize];
    rasterize_layers_window(&selected, level, window, &mut out);
    Ok(out)
}

/// Class raster of a whole pyramid level.
pub fn rasterize(
    doc: &AnnotationDocument,
    meta: &PyramidMeta,
    level: u32,
    layers: Option<&[&str]>,
) -> Result<LabelMask> {
    if level >= meta.levels {
        return Err(Error::LevelOutOfRange {
            level,
            levels: meta.levels,
        });
    }
    let (w, h) = (level_extent(meta.width0, level), level_extent(meta.height0, level));
    let labels = rasterize_window(doc, level, layers, PixelBox { x0: 0, y0: 0, x1: w, y1: h })?;
    Ok(LabelMask {
        width: w,
        height: h,
        classes: doc.class_count(),
        labels,
        confidence: None,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::pts;
    use super::super::{PolygonElement, Source};
    use super::*;
    use crate::fabric::{extract_from_labels, Contour};

    fn meta(w: u32, h: u32) -> PyramidMeta {
        PyramidMeta {
            width0: w,
            height0: h,
            tile_size: 256,
            levels: crate::pyramid::level_count(w, h, 256),
            mpp: None,
        }
    }

    fn square_layer(name: &str, class_id: u8, x0: f64, y0: f64, x1: f64, y1: f64) -> AnnotationLayer {
        let mut l = AnnotationLayer::new(name, class_id, [0, 0, 0]);
        l.elements.push(PolygonElement::new(
            format!("{name}-1"),
            pts(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)]),
            vec![],
            Source::Human,
        ));
        l
    }

    pub(crate) fn doc_from_contours(contours: &[Contour]) -> AnnotationDocument {
        let mut doc = AnnotationDocument::new("t");
        let mut layer = AnnotationLayer::new("c1", 1, [0, 255, 0]);
        for (i, c) in contours.iter().enumerate() {
            layer.elements.push(PolygonElement::new(format!("e{i}"), c.exterior.clone(), c.holes.clone(), Source::Predicted));
        }
        doc.layers.push(layer);
        doc
    }

    #[test]
    fn empty_doc_is_background() {
        let m = rasterize(&AnnotationDocument::new("x"), &meta(64, 32), 0, None).unwrap();
        assert_eq!((m.width, m.height), (64, 32));
        assert!(m.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn square_contour_round_trip() {
        let mut labels = vec![0u8; 64];
        for y in 2..6 {
            for x in 2..6 {
                labels[y * 8 + x] = 1;
            }
        }
        let contours = extract_from_labels(&labels, 8, 8, (0, 0), 1, 0);
        let m = rasterize(&doc_from_contours(&contours), &meta(8, 8), 0, None).unwrap();
        assert_eq!(m.labels, labels);
    }

    #[test]
    fn later_layer_wins() {
        let mut doc = AnnotationDocument::new("x");
        doc.layers.push(square_layer("a", 1, 0.0, 0.0, 6.0, 6.0));
        doc.layers.push(square_layer("b", 2, 4.0, 4.0, 10.0, 10.0));
        let m = rasterize(&doc, &meta(10, 10), 0, None).unwrap();
        assert_eq!(m.get(5, 5), 2);
        assert_eq!(m.get(1, 1), 1);
        assert_eq!(m.get(9, 9), 2);
        assert_eq!(m.classes, 3);
        let only_a = rasterize(&doc, &meta(10, 10), 0, Some(&["a"])).unwrap();
        assert_eq!(only_a.get(5, 5), 1);
        assert!(matches!(rasterize(&doc, &meta(10, 10), 0, Some(&["zzz"])), Err(Error::UnknownLayer(_))));
        assert!(matches!(rasterize(&doc, &meta(10, 10), 5, None), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn negative_element_subtracts() {
        let mut doc = AnnotationDocument::new("x");
        let mut l = square_layer("a", 1, 0.0, 0.0, 8.0, 8.0);
        let mut neg = PolygonElement::new("n", pts(&[(2.0, 2.0), (4.0, 2.0), (4.0, 4.0), (2.0, 4.0)]), vec![], Source::Human);
        neg.negative = true;
        l.elements.push(neg);
        doc.layers.push(l);
        let m = rasterize(&doc, &meta(8, 8), 0, None).unwrap();
        assert_eq!(m.count(1), 60);
        assert_eq!(m.get(3, 3), 0);
    }

    #[test]
    fn level_scaling() {
        let mut doc = AnnotationDocument::new("x");
        doc.layers.push(square_layer("a", 1, 0.0, 0.0, 256.0, 128.0));
        let m = rasterize(&doc, &meta(512, 512), 1, None).unwrap();
        assert_eq!(m.count(1), 128 * 64);
        let win = rasterize_window(&doc, 0, None, PixelBox { x0: 250, y0: 120, x1: 260, y1: 130 }).unwrap();
        assert_eq!(win.iter().filter(|&&v| v == 1).count(), 6 * 8);
    }
}
