//! Binary little-endian PLY with degree-0 spherical-harmonics color.
//!
//! Opacity is stored as a logit and scale as a natural log, matching the
//! files produced by common splat trainers. Extra vertex properties (normals,
//! higher SH bands) are skipped on load.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{Gaussian3D, SplatError, SplatScene, DEFAULT_FRAME, QUATERNION_NORM_TOLERANCE};

/// Zeroth-order real spherical harmonic, `1 / (2·√π)`.
pub const SH_C0: f64 = 0.28209479177;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

/// Logits beyond this saturate the sigmoid in f64; clamping keeps files finite.
const MAX_LOGIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

fn malformed(msg: impl Into<String>) -> SplatError {
    SplatError::MalformedHeader(msg.into())
}

/// Returns the parsed elements and the offset of the first data byte.
fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize), SplatError> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| malformed("no end_header line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| malformed("header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(malformed("missing `ply` magic"));
    }
    let mut format_seen = false;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => format_seen = true,
            ["format", other, ..] => return Err(malformed(format!("unsupported format `{other}`"))),
            ["element", name, count] => {
                let count = count.parse().map_err(|_| malformed(format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", ..] => return Err(malformed("list properties are not supported")),
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty).ok_or_else(|| malformed(format!("unknown property type `{ty}`")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| malformed("property before any element"))?
                    .properties
                    .push((name.to_string(), ty));
            }
            _ => return Err(malformed(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_seen {
        return Err(malformed("missing format line"));
    }
    Ok((elements, end + END.len()))
}

pub fn load_ply(bytes: &[u8]) -> Result<SplatScene, SplatError> {
    let (elements, mut offset) = parse_header(bytes)?;
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| malformed("no `vertex` element"))?;
    for e in &elements[..vertex_pos] {
        offset += e.count * e.stride();
    }
    let vertex = &elements[vertex_pos];

    // Byte offset and type of each required property within a vertex record.
    let mut slots = [(0usize, ScalarType::F32); PROPERTIES.len()];
    for (slot, name) in slots.iter_mut().zip(PROPERTIES) {
        let mut at = 0;
        let mut found = None;
        for (pname, ty) in &vertex.properties {
            if pname == name {
                found = Some((at, *ty));
                break;
            }
            at += ty.size();
        }
        *slot = found.ok_or_else(|| SplatError::MissingProperty(name.to_string()))?;
    }

    let stride = vertex.stride();
    let needed = vertex.count.checked_mul(stride).and_then(|n| n.checked_add(offset));
    if needed.is_none_or(|n| n > bytes.len()) {
        return Err(malformed(format!("vertex data shorter than {} records", vertex.count)));
    }

    let mut gaussians = Vec::with_capacity(vertex.count);
    for index in 0..vertex.count {
        let rec = &bytes[offset + index * stride..offset + (index + 1) * stride];
        let v: Vec<f64> = slots.iter().map(|(at, ty)| ty.read(&rec[*at..])).collect();
        if let Some(bad) = v.iter().position(|x| !x.is_finite()) {
            return Err(SplatError::NonFiniteValue { index, field: PROPERTIES[bad] });
        }
        let q = Quaternion::new(v[10], v[11], v[12], v[13]);
        let norm = q.norm();
        if norm == 0.0 {
            return Err(SplatError::ZeroQuaternion(index));
        }
        let rotation = if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            UnitQuaternion::from_quaternion(q)
        } else {
            UnitQuaternion::new_unchecked(q)
        };
        let color = [v[3], v[4], v[5]].map(|f| (0.5 + SH_C0 * f).clamp(0.0, 1.0));
        let g = Gaussian3D {
            mean: Vector3::new(v[0], v[1], v[2]),
            scale: Vector3::new(v[7].exp(), v[8].exp(), v[9].exp()),
            rotation,
            opacity: sigmoid(v[6]),
            color,
        };
        g.validate().map_err(|reason| SplatError::InvalidGaussian { index, reason })?;
        gaussians.push(g);
    }
    SplatScene::new(gaussians, DEFAULT_FRAME)
}

pub fn save_ply(scene: &SplatScene) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        scene.len()
    )
    .into_bytes();
    for name in PROPERTIES {
        out.extend_from_slice(format!("property float {name}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for g in scene.gaussians() {
        let q = g.rotation_wxyz();
        let values = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            logit(g.opacity),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-MAX_LOGIT, MAX_LOGIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(props: &[&str], count: usize) -> Vec<u8> {
        let mut h = format!("ply\nformat binary_little_endian 1.0\nelement vertex {count}\n");
        for p in props {
            h.push_str(&format!("property float {p}\n"));
        }
        h.push_str("end_header\n");
        h.into_bytes()
    }

    fn record(values: &[f32]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn logit_zero_loads_as_half_opacity() {
        let mut bytes = header(&PROPERTIES, 1);
        bytes.extend(record(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        let scene = load_ply(&bytes).unwrap();
        let g = &scene.gaussians()[0];
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.scale, Vector3::repeat(1.0));
        assert_eq!(g.color, [0.5; 3]);
    }

    #[test]
    fn missing_opacity() {
        let props: Vec<&str> = PROPERTIES.iter().copied().filter(|p| *p != "opacity").collect();
        let mut bytes = header(&props, 1);
        bytes.extend(record(&[0.0; 13]));
        assert_eq!(load_ply(&bytes), Err(SplatError::MissingProperty("opacity".into())));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(load_ply(b"not a ply"), Err(SplatError::MalformedHeader(_))));
        assert!(matches!(
            load_ply(b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n"),
            Err(SplatError::MalformedHeader(_))
        ));
        assert!(matches!(
            load_ply(b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty quux x\nend_header\n"),
            Err(SplatError::MalformedHeader(_))
        ));
        // Declares one vertex, carries no data.
        assert!(matches!(load_ply(&header(&PROPERTIES, 1)), Err(SplatError::MalformedHeader(_))));
    }

    #[test]
    fn non_finite_property() {
        let mut bytes = header(&PROPERTIES, 1);
        bytes.extend(record(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, f32::NAN, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]));
        assert_eq!(load_ply(&bytes), Err(SplatError::NonFiniteValue { index: 0, field: "opacity" }));
    }

    #[test]
    fn extra_properties_and_reordering() {
        let props = [
            "nx", "rot_3", "rot_2", "rot_1", "rot_0", "x", "y", "z", "scale_0", "scale_1", "scale_2", "opacity",
            "f_dc_2", "f_dc_1", "f_dc_0", "f_rest_0",
        ];
        let mut bytes = header(&props, 1);
        let lnhalf = 0.5f32.ln();
        bytes.extend(record(&[
            9.0, 0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 3.0, lnhalf, lnhalf, lnhalf, 0.0, 0.0, 0.0, 0.0, 7.0,
        ]));
        let g = load_ply(&bytes).unwrap().gaussians()[0].clone();
        assert_eq!(g.mean, Vector3::new(1.0, 2.0, 3.0));
        assert!((g.scale.x - 0.5).abs() < 1e-7);
        assert_eq!(g.rotation_wxyz(), [1.0, 0.0, 0.0, 0.0]);
    }
}
