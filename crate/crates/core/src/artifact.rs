//! Binary export of sample paths and sensitivity paths.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "DSNSPATH"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length H in bytes, u32 little-endian
//! 16      H     UTF-8 JSON header (see `ArtifactHeader`)
//! 16+H    ...   states, n_stored×B×d f64 little-endian, row-major
//!         ...   noise, n_steps×B×d f64 little-endian, if header.has_noise
//! ```

use std::io::{Read, Write};

use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{IntegrationGrid, PathKind, SamplePath};
use crate::error::{Error, Result};
use crate::sensitivity::SensitivityPath;

pub const MAGIC: &[u8; 8] = b"DSNSPATH";
pub const VERSION: u32 = 1;

/// What the state payload holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Content {
    Positions,
    Sensitivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub content: Content,
    pub kind: PathKind,
    pub seed: Option<u64>,
    pub s_start: f64,
    pub s_end: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub stride: usize,
    /// Grid step indices of the stored states.
    pub stored_steps: Vec<usize>,
    pub batch: usize,
    pub dim: usize,
    pub has_noise: bool,
}

/// Decoded artifact contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub header: ArtifactHeader,
    pub states: Array3<f64>,
    pub noise: Option<Array3<f64>>,
}

impl Artifact {
    /// Rebuild the sample path, when the artifact holds positions.
    pub fn into_sample_path(self) -> Result<SamplePath> {
        if self.header.content != Content::Positions {
            return Err(Error::usage("artifact holds a sensitivity path, not sample positions"));
        }
        let h = &self.header;
        let grid = IntegrationGrid::new(h.s_start, h.s_start + h.n_steps as f64 * h.dt, h.dt)?;
        SamplePath::from_parts(grid, h.kind, h.seed, h.stride, self.states, self.noise)
    }
}

fn write_floats<W: Write>(out: &mut W, a: ArrayView3<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(a.len() * 8);
    for x in a.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_floats<R: Read>(input: &mut R, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
    let n = shape.0 * shape.1 * shape.2;
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    let values: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array3::from_shape_vec(shape, values).map_err(|e| Error::construction(e.to_string()))
}

/// Write a header and its payload.
pub fn write<W: Write>(
    out: &mut W,
    header: &ArtifactHeader,
    states: ArrayView3<f64>,
    noise: Option<ArrayView3<f64>>,
) -> Result<()> {
    if states.shape() != [header.stored_steps.len(), header.batch, header.dim] {
        return Err(Error::usage("state array does not match the artifact header"));
    }
    if noise.is_some() != header.has_noise {
        return Err(Error::usage("noise presence does not match the artifact header"));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::construction(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    write_floats(out, states)?;
    if let Some(noise) = noise {
        write_floats(out, noise)?;
    }
    Ok(())
}

pub fn read<R: Read>(input: &mut R) -> Result<Artifact> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::usage("not a path artifact (bad magic)"));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::usage(format!("unsupported artifact version {version}")));
    }
    input.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    input.read_exact(&mut json)?;
    let header: ArtifactHeader =
        serde_json::from_slice(&json).map_err(|e| Error::usage(format!("bad artifact header: {e}")))?;
    let states = read_floats(input, (header.stored_steps.len(), header.batch, header.dim))?;
    let noise = if header.has_noise {
        Some(read_floats(input, (header.n_steps, header.batch, header.dim))?)
    } else {
        None
    };
    Ok(Artifact { header, states, noise })
}

/// Header describing `path`.
pub fn header_for_path(path: &SamplePath, content: Content) -> ArtifactHeader {
    let grid = path.grid();
    ArtifactHeader {
        content,
        kind: path.kind(),
        seed: path.seed(),
        s_start: grid.s_start(),
        s_end: grid.s_end(),
        dt: grid.dt(),
        n_steps: grid.n_steps(),
        stride: path.stride(),
        stored_steps: path.stored_steps(),
        batch: path.batch_size(),
        dim: path.dim(),
        has_noise: path.noise().is_some() && content == Content::Positions,
    }
}

pub fn write_sample_path<W: Write>(out: &mut W, path: &SamplePath) -> Result<()> {
    let header = header_for_path(path, Content::Positions);
    write(out, &header, path.states(), path.noise())
}

/// Write `psi` as a sensitivity artifact; run metadata comes from the base `path`.
pub fn write_sensitivity_path<W: Write>(out: &mut W, path: &SamplePath, psi: &SensitivityPath) -> Result<()> {
    if psi.grid() != path.grid() || psi.kind() != path.kind() {
        return Err(Error::usage("sensitivity path was not integrated along this sample path"));
    }
    let header = ArtifactHeader {
        stride: psi.stride(),
        stored_steps: psi.stored_steps(),
        has_noise: false,
        ..header_for_path(path, Content::Sensitivity)
    };
    write(out, &header, psi.psi(), None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_sde, wiener_increments};
    use crate::measures::{DiffusedMeasure, GaussianMixture};
    use crate::schedules::Schedule;
    use crate::score_source::ScoreSource;
    use ndarray::Array1;

    #[test]
    fn sample_path_round_trips() {
        let sched = Schedule::linear(1e-2).unwrap();
        let g = GaussianMixture::isotropic_gaussian(Array1::from_elem(3, 0.3), 0.2).unwrap();
        let src = ScoreSource::Analytic(DiffusedMeasure::new(g, sched));
        let z0 = wiener_increments(1, 0, 4, 3, 1.0);
        let grid = IntegrationGrid::covering(&sched, 1e-2).unwrap();
        let path = sample_sde(&src, &sched, z0.view(), &grid, 12).unwrap();
        let mut bytes = Vec::new();
        write_sample_path(&mut bytes, &path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = read(&mut bytes.as_slice()).unwrap().into_sample_path().unwrap();
        assert_eq!(back, path);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        assert!(read(&mut &b"NOTAPATHxxxxxxxx"[..]).is_err());
        let sched = Schedule::linear(1e-1).unwrap();
        let g = GaussianMixture::isotropic_gaussian(Array1::zeros(2), 1.0).unwrap();
        let src = ScoreSource::Analytic(DiffusedMeasure::new(g, sched));
        let grid = IntegrationGrid::covering(&sched, 1e-1).unwrap();
        let path = crate::dynamics::sample_ode(&src, &sched, wiener_increments(2, 0, 2, 2, 1.0).view(), &grid).unwrap();
        let mut bytes = Vec::new();
        write_sample_path(&mut bytes, &path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(read(&mut bytes.as_slice()).is_err());
    }
}
