//! Framed stdio protocol spoken with external segmentation processes.
//!
//! Every message, in both directions, is
//!
//! ```text
//! u32 little-endian payload length
//! payload = UTF-8 JSON header line terminated by '\n', then raw bytes
//! ```
//!
//! Requests:
//! - `{"op":"infer","w":W,"h":H,"c":3}` followed by `W*H*3` row-major RGB bytes
//! - `{"op":"train","manifest":PATH,"hp":{...}}` with no raw bytes
//!
//! Responses:
//! - infer: `{"w":W,"h":H,"classes":K}` then `W*H` label bytes, optionally
//!   followed by `W*H` little-endian `f32` confidences
//! - train: `{"model":PATH}`
//! - any request may be answered with `{"error":MESSAGE}`

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LabelMask, TrainingHyperparams};
use crate::error::{Error, Result};

/// Upper bound on a single frame; a 4096x4096 tile with confidence fits.
pub const MAX_FRAME: usize = 4096 * 4096 * 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Infer {
        w: u32,
        h: u32,
        c: u32,
    },
    Train {
        manifest: String,
        hp: TrainingHyperparams,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Serializes one frame.
pub fn encode_frame<H: Serialize>(header: &H, body: &[u8]) -> Vec<u8> {
    let mut head = serde_json::to_vec(header).expect("header serializes");
    head.push(b'\n');
    let len = (head.len() + body.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(body);
    out
}

pub fn write_frame<W: Write, H: Serialize>(
    w: &mut W,
    header: &H,
    body: &[u8],
) -> std::io::Result<()> {
    w.write_all(&encode_frame(header, body))?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream before a frame starts.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<(Vec<u8>, Vec<u8>)>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r
            .read(&mut len_buf[got..])
            .map_err(|e| Error::Protocol(format!("reading frame length: {e}")))?;
        if n == 0 {
            if got == 0 {
                return Ok(None);
            }
            return Err(Error::Protocol("stream ended inside frame length".into()));
        }
        got += n;
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > MAX_FRAME {
        return Err(Error::Protocol(format!(
            "frame of {len} bytes exceeds limit"
        )));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Protocol(format!("reading frame payload: {e}")))?;
    let nl = payload
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Protocol("frame header has no newline".into()))?;
    let body = payload.split_off(nl + 1);
    payload.truncate(nl);
    Ok(Some((payload, body)))
}

pub fn parse_header<T: for<'de> Deserialize<'de>>(head: &[u8]) -> Result<T> {
    serde_json::from_slice(head).map_err(|e| Error::Protocol(format!("bad header: {e}")))
}

pub fn encode_infer_request(tile: &image::RgbImage) -> Vec<u8> {
    encode_frame(
        &Request::Infer {
            w: tile.width(),
            h: tile.height(),
            c: 3,
        },
        tile.as_raw(),
    )
}

/// Body and header for an infer response carrying `mask`.
pub fn encode_mask_response(mask: &LabelMask) -> Vec<u8> {
    let mut body = mask.labels.clone();
    if let Some(conf) = &mask.confidence {
        body.reserve(conf.len() * 4);
        for v in conf {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    encode_frame(
        &ResponseHeader {
            w: Some(mask.width),
            h: Some(mask.height),
            classes: Some(mask.classes),
            ..Default::default()
        },
        &body,
    )
}

pub fn decode_mask_response(head: &[u8], body: Vec<u8>) -> Result<LabelMask> {
    let h: ResponseHeader = parse_header(head)?;
    if let Some(e) = h.error {
        return Err(Error::Process(e));
    }
    let (Some(w), Some(hh), Some(classes)) = (h.w, h.h, h.classes) else {
        return Err(Error::Protocol("infer response missing w/h/classes".into()));
    };
    let n = w as usize * hh as usize;
    let mut labels = body;
    let confidence = if labels.len() == n {
        None
    } else if labels.len() == n * 5 {
        let conf = labels[n..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        labels.truncate(n);
        Some(conf)
    } else {
        return Err(Error::Protocol(format!(
            "infer response body is {} bytes, expected {} or {}",
            labels.len(),
            n,
            n * 5
        )));
    };
    let mask = LabelMask {
        width: w,
        height: hh,
        classes,
        labels,
        confidence,
    };
    mask.validate()?;
    Ok(mask)
}
