//! Minimal glTF 2.0 writer and reader (embedded base64 buffer, one node per
//! mesh, float32 positions and vertex colors, uint32 indices).

use std::path::Path;

use base64::Engine as _;
use serde_json::{json, Value};

use super::TriangleMesh;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

const FLOAT: u64 = 5126;
const UNSIGNED_INT: u64 = 5125;
const ARRAY_BUFFER: u64 = 34962;
const ELEMENT_ARRAY_BUFFER: u64 = 34963;
const DATA_URI_PREFIX: &str = "data:application/octet-stream;base64,";

pub fn to_gltf_json<T: Scalar>(objects: &[(&str, &TriangleMesh<T>)]) -> Value {
    let mut buffer: Vec<u8> = Vec::new();
    let mut views = Vec::new();
    let mut accessors = Vec::new();
    let mut meshes = Vec::new();
    let mut nodes = Vec::new();

    let mut push_view = |bytes: &[u8], target: u64, buffer: &mut Vec<u8>| -> usize {
        while !buffer.len().is_multiple_of(4) {
            buffer.push(0);
        }
        let offset = buffer.len();
        buffer.extend_from_slice(bytes);
        views.push(json!({
            "buffer": 0, "byteOffset": offset, "byteLength": bytes.len(), "target": target
        }));
        views.len() - 1
    };

    for (i, (name, mesh)) in objects.iter().enumerate() {
        let mut pos = Vec::with_capacity(mesh.vertices.len() * 12);
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for p in &mesh.vertices {
            for k in 0..3 {
                let x = to_f64(p[k]) as f32;
                lo[k] = lo[k].min(x);
                hi[k] = hi[k].max(x);
                pos.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mut col = Vec::with_capacity(mesh.colors.len() * 12);
        for c in &mesh.colors {
            for k in 0..3 {
                col.extend_from_slice(&(to_f64(c[k]) as f32).to_le_bytes());
            }
        }
        let mut idx = Vec::with_capacity(mesh.faces.len() * 12);
        for f in &mesh.faces {
            for &k in f {
                idx.extend_from_slice(&k.to_le_bytes());
            }
        }
        let pv = push_view(&pos, ARRAY_BUFFER, &mut buffer);
        let cv = push_view(&col, ARRAY_BUFFER, &mut buffer);
        let iv = push_view(&idx, ELEMENT_ARRAY_BUFFER, &mut buffer);
        let base = accessors.len();
        accessors.push(json!({
            "bufferView": pv, "componentType": FLOAT, "count": mesh.vertices.len(),
            "type": "VEC3", "min": lo, "max": hi
        }));
        accessors.push(json!({
            "bufferView": cv, "componentType": FLOAT, "count": mesh.colors.len(), "type": "VEC3"
        }));
        accessors.push(json!({
            "bufferView": iv, "componentType": UNSIGNED_INT, "count": mesh.faces.len() * 3,
            "type": "SCALAR"
        }));
        meshes.push(json!({
            "name": name,
            "primitives": [{
                "attributes": { "POSITION": base, "COLOR_0": base + 1 },
                "indices": base + 2,
                "mode": 4
            }]
        }));
        nodes.push(json!({ "name": name, "mesh": i }));
    }

    let uri = format!(
        "{DATA_URI_PREFIX}{}",
        base64::engine::general_purpose::STANDARD.encode(&buffer)
    );
    json!({
        "asset": { "version": "2.0", "generator": "combiverse" },
        "scene": 0,
        "scenes": [{ "nodes": (0..objects.len()).collect::<Vec<_>>() }],
        "nodes": nodes,
        "meshes": meshes,
        "accessors": accessors,
        "bufferViews": views,
        "buffers": [{ "byteLength": buffer.len(), "uri": uri }]
    })
}

pub fn write_gltf<T: Scalar>(path: &Path, objects: &[(&str, &TriangleMesh<T>)]) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_gltf_json(objects)).map_err(|e| Error::Export {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn field<'a>(v: &'a Value, key: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Mesh(format!("glTF: missing `{key}`")))
}

fn as_usize(v: &Value, key: &str) -> Result<usize> {
    field(v, key)?
        .as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Mesh(format!("glTF: `{key}` is not an integer")))
}

fn accessor_bytes<'a>(doc: &Value, buffer: &'a [u8], index: usize, elem: usize) -> Result<&'a [u8]> {
    let acc = &doc["accessors"][index];
    let count = as_usize(acc, "count")?;
    let comps = match acc["type"].as_str() {
        Some("VEC3") => 3,
        Some("SCALAR") => 1,
        other => return Err(Error::Mesh(format!("glTF: unsupported accessor type {other:?}"))),
    };
    let view = &doc["bufferViews"][as_usize(acc, "bufferView")?];
    let offset = as_usize(view, "byteOffset").unwrap_or(0) + acc["byteOffset"].as_u64().unwrap_or(0) as usize;
    let len = count * comps * elem;
    buffer
        .get(offset..offset + len)
        .ok_or_else(|| Error::Mesh("glTF: accessor exceeds buffer".into()))
}

/// Reads back files written by [`write_gltf`]: one `(node name, mesh)` per node.
pub fn parse_gltf<T: Scalar>(text: &str) -> Result<Vec<(String, TriangleMesh<T>)>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Mesh(format!("glTF: {e}")))?;
    let uri = field(&doc["buffers"][0], "uri")?
        .as_str()
        .ok_or_else(|| Error::Mesh("glTF: buffer uri is not a string".into()))?;
    let payload = uri
        .strip_prefix(DATA_URI_PREFIX)
        .ok_or_else(|| Error::Mesh("glTF: only embedded buffers are supported".into()))?;
    let buffer = base64::engine::general_purpose::STANDARD
        .decode(payload)
        .map_err(|e| Error::Mesh(format!("glTF: {e}")))?;
    let f32s = |bytes: &[u8]| -> Vec<[T; 3]> {
        bytes
            .chunks_exact(12)
            .map(|c| {
                let g = |k: usize| f32::from_le_bytes(c[k * 4..k * 4 + 4].try_into().unwrap()) as f64;
                [lit(g(0)), lit(g(1)), lit(g(2))]
            })
            .collect()
    };
    let mut out = Vec::new();
    for node in field(&doc, "nodes")?.as_array().into_iter().flatten() {
        let name = node["name"].as_str().unwrap_or("object").to_string();
        let mesh = &doc["meshes"][as_usize(node, "mesh")?];
        let prim = &mesh["primitives"][0];
        let attrs = field(prim, "attributes")?;
        let vertices = f32s(accessor_bytes(&doc, &buffer, as_usize(attrs, "POSITION")?, 4)?);
        let colors = match attrs.get("COLOR_0").and_then(Value::as_u64) {
            Some(ci) => f32s(accessor_bytes(&doc, &buffer, ci as usize, 4)?),
            None => vec![[lit(0.5); 3]; vertices.len()],
        };
        let ibytes = accessor_bytes(&doc, &buffer, as_usize(prim, "indices")?, 4)?;
        let flat: Vec<u32> = ibytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let faces = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        out.push((name, TriangleMesh::new(vertices, faces, colors)?));
    }
    Ok(out)
}

pub fn read_gltf<T: Scalar>(path: &Path) -> Result<Vec<(String, TriangleMesh<T>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gltf(&text)
}
