//! MetaImage (`.mhd`) subset: 3-D unsigned label volumes, little-endian,
//! payload either in a sibling raw file or appended after the header (`LOCAL`).

use std::collections::HashMap;
use std::path::Path;

use super::{ElementType, VoxelLabelMap};
use crate::error::{Error, Result};

const WHAT: &str = "mhd header";

pub fn read_label_map(path: &Path) -> Result<VoxelLabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, rest) = split_header(&bytes)?;
    let fields = parse_header(header)?;
    let get = |k: &str| fields.get(k).map(String::as_str).ok_or_else(|| Error::format(WHAT, format!("missing key {k}")));

    if get("ObjectType")? != "Image" {
        return Err(Error::format(WHAT, "ObjectType must be Image"));
    }
    if get("NDims")? != "3" {
        return Err(Error::format(WHAT, "NDims must be 3"));
    }
    let dims: [usize; 3] = parse_triple(get("DimSize")?, "DimSize")?;
    let spacing: [f64; 3] = parse_triple(get("ElementSpacing")?, "ElementSpacing")?;
    let ty = get("ElementType")?;
    let element_type = ElementType::from_met_name(ty).ok_or_else(|| Error::format(WHAT, format!("unsupported ElementType {ty}")))?;
    let msb = fields
        .get("ElementByteOrderMSB")
        .or_else(|| fields.get("BinaryDataByteOrderMSB"))
        .ok_or_else(|| Error::format(WHAT, "missing key ElementByteOrderMSB"))?;
    if !msb.eq_ignore_ascii_case("false") {
        return Err(Error::format(WHAT, "only little-endian payloads are supported"));
    }
    let data_file = get("ElementDataFile")?;

    let payload = if data_file == "LOCAL" {
        rest.to_vec()
    } else {
        let raw = path.parent().unwrap_or(Path::new("")).join(data_file);
        std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?
    };
    let n: usize = dims.iter().product();
    let expect = n * element_type.bytes();
    if payload.len() != expect {
        return Err(Error::format(
            WHAT,
            format!("DimSize {dims:?} needs {expect} payload bytes, found {}", payload.len()),
        ));
    }
    let voxels = match element_type {
        ElementType::UShort => payload.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect(),
        ElementType::UInt => payload.chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    };
    VoxelLabelMap::with_element_type(dims, spacing, voxels, element_type)
}

/// Writes `path` (header) and a sibling `.raw` payload.
pub fn write_label_map(v: &VoxelLabelMap, path: &Path) -> Result<()> {
    let raw_name = path
        .file_stem()
        .map(|s| format!("{}.raw", s.to_string_lossy()))
        .ok_or_else(|| Error::invalid(format!("bad header path {}", path.display())))?;
    let raw_path = path.with_file_name(&raw_name);
    std::fs::write(path, header_text(v, &raw_name)).map_err(|e| Error::io(path, e))?;
    std::fs::write(&raw_path, payload(v)).map_err(|e| Error::io(&raw_path, e))
}

/// Single-file variant with the payload appended after the header.
pub fn write_label_map_local(v: &VoxelLabelMap, path: &Path) -> Result<()> {
    let mut bytes = header_text(v, "LOCAL").into_bytes();
    bytes.extend(payload(v));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn header_text(v: &VoxelLabelMap, data_file: &str) -> String {
    let [dx, dy, dz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    format!(
        "ObjectType = Image\nNDims = 3\nDimSize = {dx} {dy} {dz}\nElementSpacing = {sx:?} {sy:?} {sz:?}\n\
         ElementType = {}\nElementByteOrderMSB = False\nElementDataFile = {data_file}\n",
        v.element_type().met_name()
    )
}

fn payload(v: &VoxelLabelMap) -> Vec<u8> {
    match v.element_type() {
        ElementType::UShort => v.voxels().iter().flat_map(|&x| (x as u16).to_le_bytes()).collect(),
        ElementType::UInt => v.voxels().iter().flat_map(|&x| x.to_le_bytes()).collect(),
    }
}

/// Header ends after the `ElementDataFile` line; anything past it is the
/// LOCAL payload.
fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let mut start = 0;
    while start < bytes.len() {
        let end = bytes[start..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |p| start + p + 1);
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| Error::format(WHAT, "header is not text"))?;
        if line.trim_start().starts_with("ElementDataFile") {
            let header = std::str::from_utf8(&bytes[..end]).unwrap();
            return Ok((header, &bytes[end..]));
        }
        start = end;
    }
    Err(Error::format(WHAT, "missing key ElementDataFile"))
}

fn parse_header(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::format(WHAT, format!("malformed line {line:?}")))?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

fn parse_triple<T: std::str::FromStr + Copy + Default>(s: &str, key: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(WHAT, format!("{key} needs 3 values")));
    }
    let mut out = [T::default(); 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| Error::format(WHAT, format!("bad {key} value {p:?}")))?;
    }
    Ok(out)
}
