//! On-disk format: a human-readable `manifest.txt` plus flat binary tensor
//! files. Each tensor file is a 16-byte header — magic `CITB`, one dtype
//! byte (1 = f64, 2 = i64), one rank byte (1 or 2), two reserved bytes, two
//! little-endian u32 dims — followed by the little-endian payload. Every
//! reader cross-checks that the payload length equals the dim product.

use super::{ClinicalVector, Cohort, CohortSpec, PatientRecord, Representation, Tile};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;
use crate::{Real, Tensor64};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"CITB";
const DTYPE_F64: u8 = 1;
const DTYPE_I64: u8 = 2;

/// Integer tensor for label/mask vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i64>,
}

fn encode_header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.is_empty() || shape.len() > 2 {
        return Err(Error::format(format!("tensor rank {} unsupported (want 1 or 2)", shape.len())));
    }
    if shape.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::format("dimension exceeds u32"));
    }
    let mut h = Vec::with_capacity(16);
    h.extend_from_slice(MAGIC);
    h.push(dtype);
    h.push(shape.len() as u8);
    h.extend_from_slice(&[0u8, 0u8]);
    h.extend_from_slice(&(shape[0] as u32).to_le_bytes());
    let d1 = if shape.len() == 2 { shape[1] as u32 } else { 0 };
    h.extend_from_slice(&d1.to_le_bytes());
    Ok(h)
}

fn decode_header(bytes: &[u8], path: &Path) -> Result<(u8, Vec<usize>)> {
    if bytes.len() < 16 {
        return Err(Error::format(format!("{}: truncated header ({} bytes)", path.display(), bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(format!("{}: bad magic {:?}", path.display(), &bytes[0..4])));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F64 && dtype != DTYPE_I64 {
        return Err(Error::format(format!("{}: unknown dtype code {dtype}", path.display())));
    }
    let rank = bytes[5] as usize;
    if rank == 0 || rank > 2 {
        return Err(Error::format(format!("{}: bad rank {rank}", path.display())));
    }
    let d0 = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d1 = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let shape = if rank == 1 { vec![d0] } else { vec![d0, d1] };
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::format(format!("{}: zero dimension in header", path.display())));
    }
    Ok((dtype, shape))
}

pub fn write_tensor(path: &Path, t: &Tensor64) -> Result<()> {
    let mut bytes = encode_header(DTYPE_F64, &t.shape)?;
    bytes.reserve(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_int_tensor(path: &Path, t: &IntTensor) -> Result<()> {
    let mut bytes = encode_header(DTYPE_I64, &t.shape)?;
    bytes.reserve(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_payload(path: &Path, want_dtype: u8) -> Result<(Vec<usize>, Vec<[u8; 8]>)> {
    let bytes = fs::read(path)?;
    let (dtype, shape) = decode_header(&bytes, path)?;
    if dtype != want_dtype {
        return Err(Error::format(format!(
            "{}: dtype code {dtype}, expected {want_dtype}",
            path.display()
        )));
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != 16 + numel * 8 {
        return Err(Error::format(format!(
            "{}: payload length {} does not match header dims {:?} ({} bytes expected)",
            path.display(),
            bytes.len() - 16,
            shape,
            numel * 8,
        )));
    }
    let words = bytes[16..]
        .chunks_exact(8)
        .map(|c| <[u8; 8]>::try_from(c).unwrap())
        .collect();
    Ok((shape, words))
}

pub fn read_tensor(path: &Path) -> Result<Tensor64> {
    let (shape, words) = read_payload(path, DTYPE_F64)?;
    let data = words.into_iter().map(f64::from_le_bytes).collect();
    Tensor::new(shape, data)
}

pub fn read_int_tensor(path: &Path) -> Result<IntTensor> {
    let (shape, words) = read_payload(path, DTYPE_I64)?;
    let data = words.into_iter().map(i64::from_le_bytes).collect();
    Ok(IntTensor { shape, data })
}

// ── manifest plumbing ───────────────────────────────────────────────────

struct Manifest {
    entries: BTreeMap<String, String>,
    path: PathBuf,
}

impl Manifest {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { entries, path: path.to_path_buf() })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::format(format!("{}: missing field {key}", self.path.display())))
    }

    fn opt(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.parse().map_err(|_| {
            Error::format(format!(
                "{}: field {key} has unparseable value {:?}",
                self.path.display(),
                self.entries.get(key).unwrap()
            ))
        })
    }
}

fn spec_to_lines(spec: &CohortSpec, out: &mut String) {
    use std::fmt::Write as _;
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "spec.{k}={v}");
    };
    kv("n_patients", spec.n_patients.to_string());
    kv("prior_cr", spec.class_prior[0].to_string());
    kv("prior_pr", spec.class_prior[1].to_string());
    kv("prior_nr", spec.class_prior[2].to_string());
    kv("exact_counts", spec.exact_counts.to_string());
    kv("bag_mean", spec.bag_mean.to_string());
    kv("d_f", spec.d_f.to_string());
    kv("d_c", spec.d_c.to_string());
    kv("image_signal", spec.image_signal.to_string());
    kv("clinical_signal", spec.clinical_signal.to_string());
    kv("interaction_signal", spec.interaction_signal.to_string());
    kv("composition_signal", spec.composition_signal.to_string());
    kv("noise", spec.noise.to_string());
    kv("missing_rate", spec.missing_rate.to_string());
    kv(
        "representation",
        match spec.representation {
            Representation::Features => "features".to_string(),
            Representation::Tiles => "tiles".to_string(),
        },
    );
    kv("tile_size", spec.tile_size.to_string());
    kv("seed", spec.seed.to_string());
}

fn spec_from_manifest(m: &Manifest) -> Result<CohortSpec> {
    let representation = match m.get("spec.representation")? {
        "features" => Representation::Features,
        "tiles" => Representation::Tiles,
        other => return Err(Error::format(format!("unknown representation {other:?}"))),
    };
    Ok(CohortSpec {
        n_patients: m.parse("spec.n_patients")?,
        class_prior: [m.parse("spec.prior_cr")?, m.parse("spec.prior_pr")?, m.parse("spec.prior_nr")?],
        exact_counts: m.parse("spec.exact_counts")?,
        bag_mean: m.parse("spec.bag_mean")?,
        d_f: m.parse("spec.d_f")?,
        d_c: m.parse("spec.d_c")?,
        image_signal: m.parse("spec.image_signal")?,
        clinical_signal: m.parse("spec.clinical_signal")?,
        interaction_signal: m.parse("spec.interaction_signal")?,
        composition_signal: m.parse("spec.composition_signal")?,
        noise: m.parse("spec.noise")?,
        missing_rate: m.parse("spec.missing_rate")?,
        representation,
        tile_size: m.parse("spec.tile_size")?,
        seed: m.parse("spec.seed")?,
    })
}

/// Write a cohort as `dir/manifest.txt` plus `dir/tensors/*.citb`.
pub fn save_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors)?;
    let mut manifest = String::from("format=citmil-cohort\nversion=1\n");
    spec_to_lines(&cohort.spec, &mut manifest);
    use std::fmt::Write as _;
    writeln!(manifest, "n_patients={}", cohort.len()).unwrap();
    for (i, p) in cohort.patients.iter().enumerate() {
        let stem = format!("p{i:05}");
        writeln!(manifest, "patient.{i}.id={}", p.id).unwrap();
        writeln!(manifest, "patient.{i}.outcome={}", p.outcome).unwrap();

        let gt = format!("tensors/{stem}.gtypes.citb");
        write_int_tensor(
            &dir.join(&gt),
            &IntTensor { shape: vec![p.gen_types.len()], data: p.gen_types.iter().map(|&t| t as i64).collect() },
        )?;
        writeln!(manifest, "patient.{i}.gen_types={gt}").unwrap();

        if let Some(pred) = &p.pred_types {
            let pt = format!("tensors/{stem}.ptypes.citb");
            write_int_tensor(
                &dir.join(&pt),
                &IntTensor { shape: vec![pred.len()], data: pred.iter().map(|&t| t as i64).collect() },
            )?;
            writeln!(manifest, "patient.{i}.pred_types={pt}").unwrap();
        }

        let cl = format!("tensors/{stem}.clinical.citb");
        write_tensor(&dir.join(&cl), &Tensor64::vector(p.clinical.values.clone()))?;
        writeln!(manifest, "patient.{i}.clinical={cl}").unwrap();

        let ob = format!("tensors/{stem}.observed.citb");
        write_int_tensor(
            &dir.join(&ob),
            &IntTensor {
                shape: vec![p.clinical.observed.len()],
                data: p.clinical.observed.iter().map(|&o| o as i64).collect(),
            },
        )?;
        writeln!(manifest, "patient.{i}.observed={ob}").unwrap();

        if let Some(f) = &p.features {
            let ft = format!("tensors/{stem}.features.citb");
            write_tensor(&dir.join(&ft), f)?;
            writeln!(manifest, "patient.{i}.features={ft}").unwrap();
        }
        if let Some(tiles) = &p.tiles {
            let tl = format!("tensors/{stem}.tiles.citb");
            let hw = tiles[0].pixels.numel();
            let mut data = Vec::with_capacity(tiles.len() * hw);
            for t in tiles {
                data.extend_from_slice(&t.pixels.data);
            }
            write_tensor(&dir.join(&tl), &Tensor64::new(vec![tiles.len(), hw], data)?)?;
            writeln!(manifest, "patient.{i}.tiles={tl}").unwrap();
        }
    }
    let mut f = fs::File::create(dir.join("manifest.txt"))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Load a cohort saved by [`save_cohort`]. Fails atomically: any malformed
/// tensor or missing field rejects the whole cohort.
pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let m = Manifest::load(&dir.join("manifest.txt"))?;
    if m.get("format")? != "citmil-cohort" {
        return Err(Error::format(format!("unexpected format field {:?}", m.get("format")?)));
    }
    if m.get("version")? != "1" {
        return Err(Error::format(format!("unsupported version {:?}", m.get("version")?)));
    }
    let spec = spec_from_manifest(&m)?;
    let n: usize = m.parse("n_patients")?;
    let mut patients = Vec::with_capacity(n);
    for i in 0..n {
        let key = |s: &str| format!("patient.{i}.{s}");
        let id = m.get(&key("id"))?.to_string();
        let outcome: usize = m.parse(&key("outcome"))?;
        if outcome > 2 {
            return Err(Error::format(format!("patient {i}: outcome {outcome} out of range")));
        }
        let gen_types = read_int_tensor(&dir.join(m.get(&key("gen_types"))?))?
            .data
            .into_iter()
            .map(|v| v as usize)
            .collect::<Vec<_>>();
        let pred_types = match m.opt(&key("pred_types")) {
            Some(rel) => Some(
                read_int_tensor(&dir.join(rel))?
                    .data
                    .into_iter()
                    .map(|v| v as usize)
                    .collect(),
            ),
            None => None,
        };
        let values = read_tensor(&dir.join(m.get(&key("clinical"))?))?.data;
        let observed = read_int_tensor(&dir.join(m.get(&key("observed"))?))?
            .data
            .into_iter()
            .map(|v| v != 0)
            .collect::<Vec<bool>>();
        if observed.len() != values.len() {
            return Err(Error::format(format!("patient {i}: observed mask length mismatch")));
        }
        let features = match m.opt(&key("features")) {
            Some(rel) => Some(read_tensor(&dir.join(rel))?),
            None => None,
        };
        let tiles = match m.opt(&key("tiles")) {
            Some(rel) => {
                let flat = read_tensor(&dir.join(rel))?;
                let hw = spec.tile_size * spec.tile_size;
                if flat.cols() != hw || flat.rows() != gen_types.len() {
                    return Err(Error::format(format!("patient {i}: tile block shape {:?} inconsistent", flat.shape)));
                }
                let mut ts = Vec::with_capacity(flat.rows());
                for (r, &mt) in gen_types.iter().enumerate() {
                    ts.push(Tile {
                        pixels: Tensor64::new(vec![spec.tile_size, spec.tile_size], flat.row(r).to_vec())?,
                        morph_type: mt,
                    });
                }
                Some(ts)
            }
            None => None,
        };
        patients.push(PatientRecord {
            id,
            features,
            tiles,
            gen_types,
            pred_types,
            clinical: ClinicalVector { values, observed },
            outcome,
        });
    }
    Ok(Cohort { spec, patients })
}

/// Write a parameter set as `dir/manifest.txt` plus one tensor file per entry.
pub fn save_params(dir: &Path, params: &ParameterSet<Real>) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors)?;
    let mut manifest = String::from("format=citmil-params\nversion=1\n");
    use std::fmt::Write as _;
    writeln!(manifest, "count={}", params.len()).unwrap();
    for (i, (name, t)) in params.iter().enumerate() {
        let rel = format!("tensors/{i:04}.citb");
        write_tensor(&dir.join(&rel), t)?;
        writeln!(manifest, "param.{i}.name={name}").unwrap();
        writeln!(manifest, "param.{i}.file={rel}").unwrap();
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<ParameterSet<Real>> {
    let m = Manifest::load(&dir.join("manifest.txt"))?;
    if m.get("format")? != "citmil-params" {
        return Err(Error::format(format!("unexpected format field {:?}", m.get("format")?)));
    }
    let count: usize = m.parse("count")?;
    let mut params = ParameterSet::new();
    for i in 0..count {
        let name = m.get(&format!("param.{i}.name"))?.to_string();
        let t = read_tensor(&dir.join(m.get(&format!("param.{i}.file"))?))?;
        params.insert(name, t)?;
    }
    Ok(params)
}

/// One row per patient: id, outcome, bag size, morphology histogram.
pub fn write_summary_csv(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut out = String::from("id,outcome,bag_size,mesangial,normal,endocapillary,crescentic,sclerotic\n");
    use std::fmt::Write as _;
    for p in &cohort.patients {
        let h = p.type_histogram();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            p.id,
            super::OUTCOME_NAMES[p.outcome],
            p.bag_size(),
            h[0],
            h[1],
            h[2],
            h[3],
            h[4]
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor64::randn(&[7, 3], 1.0, &mut rng);
        let path = dir.path().join("t.citb");
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
        // header arithmetic: 16-byte header + numel * 8 payload
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 21 * 8);
    }

    #[test]
    fn corrupted_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor64::vector(vec![1.0, 2.0, 3.0]);
        let path = dir.path().join("t.citb");
        write_tensor(&path, &t).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        write_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_tensor(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn cohort_round_trip_deep_equal() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = CohortSpec::interaction_benchmark(3);
        spec.n_patients = 12;
        let cohort = generate_cohort(&spec).unwrap();
        save_cohort(dir.path(), &cohort).unwrap();
        let back = load_cohort(dir.path()).unwrap();
        assert_eq!(cohort, back);
    }

    #[test]
    fn tile_cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = CohortSpec::no_signal(4, 9).with_tiles();
        spec.bag_mean = 3.0;
        let cohort = generate_cohort(&spec).unwrap();
        save_cohort(dir.path(), &cohort).unwrap();
        assert_eq!(load_cohort(dir.path()).unwrap(), cohort);
    }

    #[test]
    fn truncated_cohort_never_loads_partially() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = CohortSpec::interaction_benchmark(4);
        spec.n_patients = 5;
        let cohort = generate_cohort(&spec).unwrap();
        save_cohort(dir.path(), &cohort).unwrap();
        // truncate one tensor in the middle
        let victim = dir.path().join("tensors/p00002.clinical.citb");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..10]).unwrap();
        assert!(load_cohort(dir.path()).is_err());
    }

    #[test]
    fn params_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParameterSet::new();
        p.insert("z.w", Tensor64::randn(&[3, 2], 1.0, &mut rng)).unwrap();
        p.insert("a.b", Tensor64::randn(&[4], 1.0, &mut rng)).unwrap();
        save_params(dir.path(), &p).unwrap();
        let back = load_params(dir.path()).unwrap();
        assert_eq!(p, back);
        let names: Vec<&str> = back.names().collect();
        assert_eq!(names, vec!["z.w", "a.b"]);
    }
}
