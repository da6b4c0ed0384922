//! OBJ / PLY mesh files and the per-vertex label sidecar.
//!
//! The sidecar lives next to the mesh with extension `.labels`, one line
//! per vertex: `index<TAB>label`. Missing sidecar means every vertex is
//! `vessel_wall`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{RegionLabel, TriangleMesh, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("ply") => Ok(MeshFormat::Ply),
            _ => Err(Error::Format(format!(
                "cannot infer mesh format from {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

pub fn label_sidecar_path(mesh_path: &Path) -> PathBuf {
    mesh_path.with_extension("labels")
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (vertices, faces) = match format {
        MeshFormat::Obj => read_obj(&mut reader)?,
        MeshFormat::Ply => read_ply(&mut reader)?,
    };
    let sidecar = label_sidecar_path(path);
    let labels = if sidecar.exists() {
        let f = File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        read_labels(BufReader::new(f), vertices.len())?
    } else {
        vec![RegionLabel::VesselWall; vertices.len()]
    };
    TriangleMesh::with_labels(vertices, faces, labels)
}

/// Writes the mesh and its label sidecar. PLY is written as binary
/// little-endian doubles.
pub fn save_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        MeshFormat::Obj => write_obj(mesh, &mut w),
        MeshFormat::Ply => write_ply(mesh, &mut w, PlyEncoding::BinaryLittleEndian),
    }
    .and_then(|_| w.flush())
    .map_err(|e| Error::io(path, e))?;

    let sidecar = label_sidecar_path(path);
    let file = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let mut w = BufWriter::new(file);
    write_labels(mesh.labels(), &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&sidecar, e))
}

pub fn read_labels<R: BufRead>(reader: R, vertex_count: usize) -> Result<Vec<RegionLabel>> {
    let mut labels: Vec<Option<RegionLabel>> = vec![None; vertex_count];
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(n + 1, e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (idx, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(n + 1, "expected `index<TAB>label`"))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::parse(n + 1, format!("bad vertex index `{idx}`")))?;
        if idx >= vertex_count {
            return Err(Error::parse(
                n + 1,
                format!("label for vertex {idx} but mesh has {vertex_count}"),
            ));
        }
        labels[idx] = Some(label.parse().map_err(|e: String| Error::parse(n + 1, e))?);
    }
    Ok(labels
        .into_iter()
        .map(|l| l.unwrap_or(RegionLabel::VesselWall))
        .collect())
}

pub fn write_labels<W: Write>(labels: &[RegionLabel], w: &mut W) -> std::io::Result<()> {
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i}\t{l}")?;
    }
    Ok(())
}

type RawMesh = (Vec<Vec3>, Vec<[usize; 3]>);

pub fn read_obj<R: BufRead>(reader: &mut R) -> Result<RawMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::parse(n + 1, e.to_string()))?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in p.iter_mut() {
                    let t = toks
                        .next()
                        .ok_or_else(|| Error::parse(n + 1, "vertex needs three coordinates"))?;
                    *c = t
                        .parse()
                        .map_err(|_| Error::parse(n + 1, format!("bad coordinate `{t}`")))?;
                }
                vertices.push(Vec3::new(p[0], p[1], p[2]));
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        let i: i64 = head
                            .parse()
                            .map_err(|_| Error::parse(n + 1, format!("bad face index `{t}`")))?;
                        match i {
                            i if i > 0 => Ok((i - 1) as usize),
                            i if i < 0 && (-i) as usize <= vertices.len() => {
                                Ok(vertices.len() - (-i) as usize)
                            }
                            _ => Err(Error::parse(n + 1, format!("bad face index `{t}`"))),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                if idx.len() != 3 {
                    return Err(Error::NonTriangleFace {
                        face: faces.len(),
                        count: idx.len(),
                    });
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

pub fn write_obj<W: Write>(mesh: &TriangleMesh, w: &mut W) -> std::io::Result<()> {
    for v in mesh.vertices() {
        writeln!(w, "v {:?} {:?} {:?}", v.x, v.y, v.z)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_bin<R: Read>(self, r: &mut R, big_endian: bool) -> std::io::Result<f64> {
        let mut buf = [0u8; 8];
        let b = &mut buf[..self.size()];
        r.read_exact(b)?;
        if big_endian {
            b.reverse();
        }
        Ok(match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug, PartialEq)]
enum PlyFormat {
    Ascii,
    Binary { big_endian: bool },
}

pub fn read_ply<R: BufRead>(reader: &mut R) -> Result<RawMesh> {
    let mut line_no = 0;
    let mut next_line = |r: &mut R| -> Result<String> {
        let mut s = String::new();
        line_no += 1;
        let n = r
            .read_line(&mut s)
            .map_err(|e| Error::parse(line_no, e.to_string()))?;
        if n == 0 {
            return Err(Error::parse(line_no, "unexpected end of header"));
        }
        Ok(s.trim_end().to_string())
    };
    if next_line(reader)? != "ply" {
        return Err(Error::parse(1, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = next_line(reader)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => {
                format = Some(PlyFormat::Binary { big_endian: false })
            }
            ["format", "binary_big_endian", _] => {
                format = Some(PlyFormat::Binary { big_endian: true })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(0, format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(0, "property before element"))?;
                let ct = Scalar::parse(ct).ok_or_else(|| Error::parse(0, "bad list type"))?;
                let it = Scalar::parse(it).ok_or_else(|| Error::parse(0, "bad list type"))?;
                el.props.push(Property::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(0, "property before element"))?;
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| Error::parse(0, format!("bad property type `{ty}`")))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(Error::parse(0, format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(0, "missing format line"))?;

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut ascii_tokens: Vec<String> = Vec::new();
    if format == PlyFormat::Ascii {
        let mut rest = String::new();
        reader
            .read_to_string(&mut rest)
            .map_err(|e| Error::parse(0, e.to_string()))?;
        ascii_tokens = rest.split_whitespace().map(str::to_string).collect();
        ascii_tokens.reverse();
    }
    let mut read_value = |r: &mut R, ty: Scalar| -> Result<f64> {
        match format {
            PlyFormat::Ascii => {
                let t = ascii_tokens
                    .pop()
                    .ok_or_else(|| Error::parse(0, "unexpected end of ply body"))?;
                t.parse()
                    .map_err(|_| Error::parse(0, format!("bad ply value `{t}`")))
            }
            PlyFormat::Binary { big_endian } => ty
                .read_bin(r, big_endian)
                .map_err(|e| Error::parse(0, e.to_string())),
        }
    };

    for el in &elements {
        for _ in 0..el.count {
            let mut pos = [0.0; 3];
            let mut face: Option<Vec<usize>> = None;
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = read_value(reader, *ty)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => pos[0] = v,
                                "y" => pos[1] = v,
                                "z" => pos[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, ct, it) => {
                        let n = read_value(reader, *ct)? as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(read_value(reader, *it)?);
                        }
                        if el.name == "face"
                            && (name == "vertex_indices" || name == "vertex_index")
                        {
                            face = Some(idx.into_iter().map(|x| x as usize).collect());
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => vertices.push(Vec3::new(pos[0], pos[1], pos[2])),
                "face" => {
                    let f = face.ok_or_else(|| Error::parse(0, "face without vertex_indices"))?;
                    if f.len() != 3 {
                        return Err(Error::NonTriangleFace {
                            face: faces.len(),
                            count: f.len(),
                        });
                    }
                    faces.push([f[0], f[1], f[2]]);
                }
                _ => {}
            }
        }
    }
    Ok((vertices, faces))
}

pub fn write_ply<W: Write>(
    mesh: &TriangleMesh,
    w: &mut W,
    encoding: PlyEncoding,
) -> std::io::Result<()> {
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format {fmt} 1.0")?;
    writeln!(w, "element vertex {}", mesh.vertex_count())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "element face {}", mesh.face_count())?;
    writeln!(w, "property list uchar int vertex_indices")?;
    writeln!(w, "end_header")?;
    match encoding {
        PlyEncoding::Ascii => {
            for v in mesh.vertices() {
                writeln!(w, "{:?} {:?} {:?}", v.x, v.y, v.z)?;
            }
            for f in mesh.faces() {
                writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            for v in mesh.vertices() {
                for c in [v.x, v.y, v.z] {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
            for f in mesh.faces() {
                w.write_all(&[3u8])?;
                for &i in f {
                    w.write_all(&(i as i32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use std::io::Cursor;

    #[test]
    fn obj_tetrahedron() {
        let src = "# tetra\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 3 2\nf 1 2 4\nf 2 3 4\nf 1 4 3\n";
        let (v, f) = read_obj(&mut Cursor::new(src)).unwrap();
        let m = TriangleMesh::new(v, f).unwrap();
        assert_eq!(m.vertex_count(), 4);
        assert_eq!(m.face_count(), 4);
        assert!(m.boundary_rings().is_empty());
    }

    #[test]
    fn obj_slash_and_negative_indices() {
        let src = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3/1/1 -2/2/2 -1/3/3\n";
        let (_, f) = read_obj(&mut Cursor::new(src)).unwrap();
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn obj_quad_rejected() {
        let src = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(matches!(
            read_obj(&mut Cursor::new(src)),
            Err(Error::NonTriangleFace { count: 4, .. })
        ));
    }

    #[test]
    fn obj_garbage_rejected() {
        let src = "v 0 0 zero\n";
        assert!(matches!(
            read_obj(&mut Cursor::new(src)),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn ply_ascii_and_binary_agree() {
        let mesh = primitives::icosphere(1.0, 1).unwrap();
        let mut ascii = Vec::new();
        write_ply(&mesh, &mut ascii, PlyEncoding::Ascii).unwrap();
        let mut bin = Vec::new();
        write_ply(&mesh, &mut bin, PlyEncoding::BinaryLittleEndian).unwrap();
        let a = read_ply(&mut Cursor::new(ascii)).unwrap();
        let b = read_ply(&mut Cursor::new(bin)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, mesh.vertices());
    }

    #[test]
    fn ply_with_extra_properties() {
        let src = "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar uint vertex_indices\nend_header\n0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";
        let (v, f) = read_ply(&mut Cursor::new(src)).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[1], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(f, vec![[0, 1, 2]]);
    }

    #[test]
    fn icosphere3_ply_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ico.ply");
        save_mesh(&primitives::icosphere(1.0, 3).unwrap(), &path, MeshFormat::Ply).unwrap();
        let m = load_mesh(&path, MeshFormat::Ply).unwrap();
        assert_eq!(m.vertex_count(), 642);
        assert_eq!(m.face_count(), 1280);
        assert!(m.boundary_rings().is_empty());
    }

    #[test]
    fn missing_sidecar_means_vessel_wall() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let m = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert!(m.labels().iter().all(|&l| l == RegionLabel::VesselWall));
        assert_eq!(m.boundary_rings().len(), 1);
    }

    #[test]
    fn labels_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.obj");
        let mut mesh = primitives::cylinder(1.0, 1.0, 6, 2).unwrap();
        let mut labels = mesh.labels().to_vec();
        labels[0] = RegionLabel::Dome;
        labels[5] = RegionLabel::CrossSection(2);
        mesh.relabel(labels).unwrap();
        save_mesh(&mesh, &path, MeshFormat::Obj).unwrap();
        let back = load_mesh(&path, MeshFormat::Obj).unwrap();
        assert_eq!(back.labels(), mesh.labels());
    }
}
