//! Dense document embeddings and the vector math shared by the selection
//! stages.
//!
//! On-disk layout, all little-endian:
//!
//! ```text
//! "DQGEMB01" | n: u64 | d: u32 | n*d f32, row-major
//! ```
//!
//! Row `i` belongs to collection ordinal `i`. An optional `<path>.ids`
//! sidecar lists one document id per line so the pairing can be checked.

use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::Collection;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::tokenize;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"DQGEMB01";
const HEADER_LEN: usize = 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<F> {
    n: usize,
    d: usize,
    data: Vec<F>,
}

impl<F: Scalar> EmbeddingMatrix<F> {
    pub fn new(n: usize, d: usize, data: Vec<F>) -> Result<Self> {
        if d == 0 {
            return Err(Error::Validation("embedding dimension must be at least 1".into()));
        }
        if data.len() != n * d {
            return Err(Error::SizeMismatch(format!(
                "{} values for a {n}x{d} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value in row {}",
                pos / d
            )));
        }
        Ok(Self { n, d, data })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::SizeMismatch(format!(
                "row {i} has {} values, expected {d}",
                rows[i].len()
            )));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, F> {
        self.data.chunks_exact(self.d)
    }

    pub fn cast<G: Scalar>(&self) -> EmbeddingMatrix<G> {
        EmbeddingMatrix {
            n: self.n,
            d: self.d,
            data: self.data.iter().map(|&v| G::of(v.as_f64())).collect(),
        }
    }

    /// Copy with every row scaled to unit L2 norm. Zero rows stay zero.
    pub fn normalized(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.d) {
            let norm = l2_norm(row);
            if norm > F::zero() {
                row.iter_mut().for_each(|v| *v = *v / norm);
            }
        }
        Self {
            n: self.n,
            d: self.d,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.n as u64).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_single().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != EMBEDDING_MAGIC {
            return Err(Error::Format("missing DQGEMB01 header".into()));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let d = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = (n as u128) * (d as u128) * 4;
        if payload.len() as u128 != expected {
            return Err(Error::SizeMismatch(format!(
                "header declares {n}x{d} ({expected} bytes), payload has {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| F::from_single(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Self::new(n as usize, d, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_embeddings<F: Scalar>(path: &Path) -> Result<EmbeddingMatrix<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn ids_sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_ids_sidecar<'a>(path: &Path, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    let side = ids_sidecar_path(path);
    fs::write(&side, out).map_err(|e| Error::io(side, e))
}

/// Reads `<path>.ids` if present.
pub fn read_ids_sidecar(path: &Path) -> Result<Option<Vec<String>>> {
    let side = ids_sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(Some(text.lines().map(str::to_owned).collect()))
}

/// Checks that an embedding file pairs row-for-row with `collection`.
pub fn check_alignment<F: Scalar>(
    matrix: &EmbeddingMatrix<F>,
    sidecar: Option<&[String]>,
    collection: &Collection,
) -> Result<()> {
    if matrix.rows() != collection.len() {
        return Err(Error::Alignment(format!(
            "{} embedding rows for {} documents",
            matrix.rows(),
            collection.len()
        )));
    }
    if let Some(ids) = sidecar {
        if ids.len() != collection.len() {
            return Err(Error::Alignment(format!(
                "{} ids in sidecar for {} documents",
                ids.len(),
                collection.len()
            )));
        }
        if let Some((i, (a, b))) = ids
            .iter()
            .zip(collection.ids())
            .enumerate()
            .find(|(_, (a, b))| a.as_str() != *b)
        {
            return Err(Error::Alignment(format!(
                "row {i}: sidecar id {a:?} but collection id {b:?}"
            )));
        }
    }
    Ok(())
}

pub fn dot<F: Scalar>(u: &[F], v: &[F]) -> F {
    u.iter().zip(v).fold(F::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn l2_norm<F: Scalar>(u: &[F]) -> F {
    dot(u, u).sqrt()
}

pub fn squared_euclidean<F: Scalar>(u: &[F], v: &[F]) -> F {
    u.iter().zip(v).fold(F::zero(), |acc, (&a, &b)| {
        let diff = a - b;
        acc + diff * diff
    })
}

/// Cosine of the angle between `u` and `v`, clamped to `[-1, 1]`.
pub fn cosine_similarity<F: Scalar>(u: &[F], v: &[F]) -> Result<F> {
    if u.len() != v.len() {
        return Err(Error::SizeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu == F::zero() || nv == F::zero() {
        return Err(Error::DegenerateVector("zero-norm vector in cosine".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-F::one()).min(F::one()))
}

/// Deterministic feature-hashing embedder used in place of a neural encoder.
///
/// Each token adds ±1 to one of `d` buckets; bucket and sign come from two
/// independently seeded hashes. The sum is L2-normalized.
pub fn hash_embed<F: Scalar>(text: &str, d: usize, seed: u64) -> Result<Vec<F>> {
    if d < 8 {
        return Err(Error::InvalidConfig(format!(
            "hash embedding dimension {d} is below the minimum of 8"
        )));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::DegenerateVector("text has no tokens".into()));
    }
    let mut acc = vec![0f64; d];
    let bucket_seed = splitmix64(seed);
    let sign_seed = splitmix64(seed ^ 0x5851_F42D_4C95_7F2D);
    for t in &tokens {
        let bucket = (fnv1a(bucket_seed, t.as_bytes()) % d as u64) as usize;
        let sign = if fnv1a(sign_seed, t.as_bytes()) & 1 == 0 {
            1.0
        } else {
            -1.0
        };
        acc[bucket] += sign;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every token cancelled against another.
        return Err(Error::DegenerateVector("hashed features cancel to zero".into()));
    }
    Ok(acc.into_iter().map(|v| F::of(v / norm)).collect())
}

/// Hash-embeds every rendered document of `collection`.
pub fn hash_embed_collection<F: Scalar>(
    collection: &Collection,
    d: usize,
    seed: u64,
) -> Result<EmbeddingMatrix<F>> {
    let mut data = Vec::with_capacity(collection.len() * d);
    for doc in collection {
        let v = hash_embed::<F>(&doc.render(), d, seed).map_err(|e| match e {
            Error::DegenerateVector(m) => {
                Error::DegenerateVector(format!("document {:?}: {m}", doc.id))
            }
            other => other,
        })?;
        data.extend(v);
    }
    EmbeddingMatrix::new(collection.len(), d, data)
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(n: u64, d: u32) -> Vec<u8> {
        let mut b = EMBEDDING_MAGIC.to_vec();
        b.extend_from_slice(&n.to_le_bytes());
        b.extend_from_slice(&d.to_le_bytes());
        b
    }

    #[test]
    fn empty_matrix() {
        let m = EmbeddingMatrix::<f32>::from_bytes(&header(0, 4)).unwrap();
        assert_eq!((m.rows(), m.dim()), (0, 4));
    }

    #[test]
    fn hand_written_two_by_three() {
        let mut bytes = header(2, 3);
        for v in [1.0f32, -2.0, 0.5, 0.0, 3.25, -0.125] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let m = EmbeddingMatrix::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(m.row(0), &[1.0, -2.0, 0.5]);
        assert_eq!(m.row(1), &[0.0, 3.25, -0.125]);
        assert_eq!(m.to_bytes(), bytes);
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = header(2, 3);
        for v in [1.0f32; 5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            EmbeddingMatrix::<f32>::from_bytes(&bytes),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = header(0, 4);
        bytes[0] = b'X';
        assert!(matches!(
            EmbeddingMatrix::<f32>::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_reports_row() {
        let mut bytes = header(3, 2);
        for v in [0.0f32, 1.0, 2.0, 3.0, 4.0, f32::NAN] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        match EmbeddingMatrix::<f32>::from_bytes(&bytes) {
            Err(Error::Validation(m)) => assert!(m.contains("row 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(cosine_similarity(&[1.0f64], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_is_clamped() {
        let u = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let c = cosine_similarity(&u, &u).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn hash_embed_is_deterministic_and_unit() {
        let a = hash_embed::<f32>("The quick brown fox", 64, 7).unwrap();
        let b = hash_embed::<f32>("The quick brown fox", 64, 7).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!((l2_norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hash_embed_repeated_token_is_parallel() {
        let a = hash_embed::<f64>("cat cat", 32, 1).unwrap();
        let b = hash_embed::<f64>("cat", 32, 1).unwrap();
        assert!((cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hash_embed_rejects_small_dim_and_empty_text() {
        assert!(matches!(
            hash_embed::<f32>("x", 4, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            hash_embed::<f32>(" ,. ", 16, 0),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(
            ids_sidecar_path(Path::new("/tmp/e.bin")),
            PathBuf::from("/tmp/e.bin.ids")
        );
    }
}
