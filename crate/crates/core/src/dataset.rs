//! Synthetic slice datasets: generation and on-disk layout
//! (`manifest.json` plus one `slice_NNNN.met` container per slice).

use std::fs;
use std::path::{Path, PathBuf};

use megre_autodiff::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, Axis, Container};
use crate::data::{CoilSensitivities, KSpaceData, MultiEchoImage};
use crate::error::{invalid, io_err, Error, Result};
use crate::phantom::{self, PhantomKind, PhantomParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_slices: usize,
    pub size: usize,
    pub n_echoes: usize,
    pub n_coils: usize,
    pub noise_sigma: f32,
    pub seed: u64,
    pub kind: PhantomKind,
    pub first_echo_ms: f32,
    pub echo_spacing_ms: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_slices: 80,
            size: 32,
            n_echoes: 4,
            n_coils: 4,
            noise_sigma: 0.01,
            seed: 0,
            kind: PhantomKind::SheppLoganLike,
            first_echo_ms: phantom::FIRST_ECHO_MS,
            echo_spacing_ms: phantom::ECHO_SPACING_MS,
        }
    }
}

/// One training example: noiseless label, fully sampled noisy k-space and the
/// maps that generated them.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub label: MultiEchoImage,
    pub kspace: KSpaceData,
    pub coils: CoilSensitivities,
    pub params: PhantomParams,
}

/// Independent per-slice seed stream.
pub fn slice_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_slice(spec: &DatasetSpec, index: usize) -> Result<Slice> {
    let seed = slice_seed(spec.seed, index);
    let mut params = phantom::make_phantom(spec.kind, spec.size, spec.n_echoes, seed)?;
    params.echo_times = phantom::echo_times(spec.first_echo_ms, spec.echo_spacing_ms, spec.n_echoes);
    let label = phantom::simulate_signal(&params)?;
    let coils = phantom::make_coils(spec.n_coils, spec.size, seed)?;
    let kspace = phantom::acquire_full_kspace(&label, &coils, spec.noise_sigma, seed)?;
    Ok(Slice {
        index,
        label,
        kspace,
        coils,
        params,
    })
}

pub fn generate(spec: &DatasetSpec) -> Result<Vec<Slice>> {
    (0..spec.n_slices)
        .into_par_iter()
        .map(|i| generate_slice(spec, i))
        .collect()
}

const IMAGE_AXES: [Axis; 3] = [Axis::Echo, Axis::Y, Axis::X];
const KSPACE_AXES: [Axis; 4] = [Axis::Echo, Axis::Coil, Axis::Ky, Axis::Kx];
const MASK_AXES: [Axis; 3] = [Axis::Echo, Axis::Ky, Axis::Kx];
const COIL_AXES: [Axis; 3] = [Axis::Coil, Axis::Y, Axis::X];
const MAP_AXES: [Axis; 2] = [Axis::Y, Axis::X];

#[derive(Serialize, Deserialize)]
struct SliceMeta {
    index: usize,
    echo_times: Vec<f32>,
    noise_sigma: f32,
}

pub fn slice_to_container(slice: &Slice) -> Result<Container> {
    let meta = SliceMeta {
        index: slice.index,
        echo_times: slice.params.echo_times.clone(),
        noise_sigma: slice.kspace.noise_sigma(),
    };
    let mut c = Container::new(serde_json::to_value(meta)?);
    c.push_c64("label", &IMAGE_AXES, slice.label.tensor().clone())?;
    c.push_c64("kspace", &KSPACE_AXES, slice.kspace.samples().clone())?;
    c.push_f32("masks", &MASK_AXES, slice.kspace.masks().clone())?;
    c.push_c64("coils", &COIL_AXES, slice.coils.tensor().clone())?;
    c.push_f32("m0", &MAP_AXES, slice.params.m0.clone())?;
    c.push_f32("r2star", &MAP_AXES, slice.params.r2star.clone())?;
    c.push_f32("phi0", &MAP_AXES, slice.params.phi0.clone())?;
    c.push_f32("field", &MAP_AXES, slice.params.field.clone())?;
    Ok(c)
}

pub fn slice_from_container(c: &Container) -> Result<Slice> {
    let meta: SliceMeta = serde_json::from_value(c.meta.clone())?;
    let params = PhantomParams {
        m0: c.f32("m0")?.clone(),
        r2star: c.f32("r2star")?.clone(),
        phi0: c.f32("phi0")?.clone(),
        field: c.f32("field")?.clone(),
        echo_times: meta.echo_times,
    };
    params.validate()?;
    Ok(Slice {
        index: meta.index,
        label: MultiEchoImage::new(c.c64("label")?.clone())?,
        kspace: KSpaceData::new(c.c64("kspace")?.clone(), c.f32("masks")?.clone(), meta.noise_sigma)?,
        coils: CoilSensitivities::new(c.c64("coils")?.clone())?,
        params,
    })
}

/// Image stack file with a single `images` array.
pub fn image_container(images: &MultiEchoImage, meta: serde_json::Value) -> Result<Container> {
    let mut c = Container::new(meta);
    c.push_c64("images", &IMAGE_AXES, images.tensor().clone())?;
    Ok(c)
}

/// Reads `images` (reconstructions) or, failing that, `label` (dataset slices).
pub fn images_from_container(c: &Container) -> Result<MultiEchoImage> {
    match c.c64("images") {
        Ok(t) => MultiEchoImage::new(t.clone()),
        Err(_) => MultiEchoImage::new(c.c64("label")?.clone()),
    }
}

pub fn map_container(maps: &[(&str, &Tensor)], meta: serde_json::Value) -> Result<Container> {
    let mut c = Container::new(meta);
    for (name, t) in maps {
        c.push_f32(*name, &MAP_AXES, (*t).clone())?;
    }
    Ok(c)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    files: Vec<String>,
}

pub fn slice_file_name(index: usize) -> String {
    format!("slice_{index:04}.met")
}

pub fn write_dataset(dir: &Path, spec: &DatasetSpec, slices: &[Slice]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files = Vec::with_capacity(slices.len());
    for s in slices {
        let name = slice_file_name(s.index);
        slice_to_container(s)?.write(&dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        files,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<Slice>)> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.join(f)).collect();
    let slices = paths
        .par_iter()
        .map(|p| slice_from_container(&Container::read(p)?))
        .collect::<Result<Vec<_>>>()?;
    if slices.is_empty() {
        return invalid(format!("dataset {} has no slices", dir.display()));
    }
    let shape = slices[0].label.tensor().shape().to_vec();
    if let Some(bad) = slices.iter().find(|s| s.label.tensor().shape() != shape.as_slice()) {
        return Err(Error::InvalidArgument(format!(
            "slice {} has shape {:?}, expected {shape:?}",
            bad.index,
            bad.label.tensor().shape()
        )));
    }
    Ok((manifest.spec, slices))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_differ_and_repeat() {
        let spec = DatasetSpec {
            n_slices: 2,
            size: 8,
            ..DatasetSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_ne!(a[0].label, a[1].label);
        let back = slice_from_container(&slice_to_container(&a[1]).unwrap()).unwrap();
        assert_eq!(back, a[1]);
    }
}
