//! On-disk formats: grayscale PNG images, single-channel PNG masks and
//! polygon annotations exported by the VGG image annotator.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use ndarray::Array2;
use serde_json::Value;

use crate::dataprep::{PolygonInstance, SemanticMask};
use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_luma(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.into_luma8())
}

fn encode_png(img: &GrayImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .expect("encoding an in-memory PNG cannot fail");
    bytes
}

/// Reads an image as one channel scaled to `[0, 1]`.
pub fn read_gray_image(path: &Path) -> Result<Array2<f64>> {
    let img = open_luma(path)?;
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
    }))
}

pub fn gray_image_png(image: &Array2<f64>) -> Vec<u8> {
    let (h, w) = image.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([(image[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    encode_png(&img)
}

pub fn write_gray_image(path: &Path, image: &Array2<f64>) -> Result<()> {
    write_bytes(path, &gray_image_png(image))
}

pub fn read_mask(path: &Path) -> Result<SemanticMask> {
    let img = open_luma(path)?;
    let (w, h) = img.dimensions();
    Ok(SemanticMask::new(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0]
    })))
}

pub fn mask_png(mask: &SemanticMask) -> Vec<u8> {
    let data = mask.data();
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([data[[y as usize, x as usize]]])
    });
    encode_png(&img)
}

pub fn write_mask(path: &Path, mask: &SemanticMask) -> Result<()> {
    write_bytes(path, &mask_png(mask))
}

/// Polygons of one annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub filename: String,
    pub instances: Vec<PolygonInstance>,
}

fn number_list(value: Option<&Value>, what: &str, source: &str) -> Result<Vec<f64>> {
    value
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(source, format!("polygon is missing '{what}'")))?
        .iter()
        .map(|v| {
            v.as_f64()
                .ok_or_else(|| Error::format(source, format!("non-numeric entry in '{what}'")))
        })
        .collect()
}

/// Parses a VIA project/export. `regions` may be a list or an index-keyed
/// object; the class name is read from `region_attributes[class_key]`.
/// Non-polygon shapes are skipped.
pub fn parse_via_annotations(json_text: &str, class_key: &str, source: &str) -> Result<Vec<AnnotatedImage>> {
    let root: Value = serde_json::from_str(json_text).map_err(|e| Error::format(source, e.to_string()))?;
    // Full VIA projects nest the per-image records under `_via_img_metadata`.
    let images = root.get("_via_img_metadata").unwrap_or(&root);
    let images = images
        .as_object()
        .ok_or_else(|| Error::format(source, "expected an object of image records"))?;

    let mut out = Vec::new();
    for (key, record) in images {
        let filename = record
            .get("filename")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::format(source, format!("record '{key}' has no filename")))?
            .to_string();
        let regions: Vec<&Value> = match record.get("regions") {
            Some(Value::Array(list)) => list.iter().collect(),
            Some(Value::Object(map)) => map.values().collect(),
            None | Some(Value::Null) => Vec::new(),
            Some(_) => return Err(Error::format(source, format!("record '{key}' has malformed regions"))),
        };
        let mut instances = Vec::new();
        for region in regions {
            let shape = region
                .get("shape_attributes")
                .ok_or_else(|| Error::format(source, format!("region in '{filename}' has no shape_attributes")))?;
            if shape.get("name").and_then(Value::as_str) != Some("polygon") {
                continue;
            }
            let xs = number_list(shape.get("all_points_x"), "all_points_x", source)?;
            let ys = number_list(shape.get("all_points_y"), "all_points_y", source)?;
            if xs.len() != ys.len() {
                return Err(Error::format(source, format!("polygon in '{filename}' has mismatched x/y counts")));
            }
            let class = region
                .get("region_attributes")
                .and_then(|a| a.get(class_key))
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    Error::format(source, format!("region in '{filename}' has no '{class_key}' attribute"))
                })?
                .to_string();
            instances.push(PolygonInstance {
                class,
                vertices: xs.into_iter().zip(ys).collect(),
                image_id: filename.clone(),
            });
        }
        out.push(AnnotatedImage { filename, instances });
    }
    Ok(out)
}

/// Serializes polygons in the VIA export layout (list-style regions).
pub fn via_annotations_json(images: &[AnnotatedImage], class_key: &str) -> String {
    let mut root = serde_json::Map::new();
    for image in images {
        let regions: Vec<Value> = image
            .instances
            .iter()
            .map(|inst| {
                serde_json::json!({
                    "shape_attributes": {
                        "name": "polygon",
                        "all_points_x": inst.vertices.iter().map(|v| v.0).collect::<Vec<_>>(),
                        "all_points_y": inst.vertices.iter().map(|v| v.1).collect::<Vec<_>>(),
                    },
                    "region_attributes": { class_key: inst.class },
                })
            })
            .collect();
        root.insert(
            image.filename.clone(),
            serde_json::json!({
                "filename": image.filename,
                "size": -1,
                "regions": regions,
                "file_attributes": {},
            }),
        );
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(root)).expect("valid JSON value");
    text.push('\n');
    text
}
