//! The four image filters: decodability, duplicate removal, photographic
//! quality and gloss agreement.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::Cursor;

use image::{ImageFormat, ImageReader};
use thiserror::Error;

use super::{PipelineError, StageCounts};
use crate::embed::{dot, EmbedError, Embedding, EmbeddingProvider};
use crate::kg::{ContentHash, FilterFlags, Gloss, ImageRecord, Lang, NodeId};

/// Why bytes failed the validity filter.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidImage {
    #[error("empty payload")]
    Empty,
    #[error("not a recognized image format")]
    UnknownFormat,
    #[error("unsupported image format {0}")]
    Unsupported(String),
    #[error("corrupt image: {0}")]
    Corrupt(String),
}

impl InvalidImage {
    /// Short code used as a report key.
    pub fn code(&self) -> &'static str {
        match self {
            InvalidImage::Empty => "empty",
            InvalidImage::UnknownFormat => "unknown_format",
            InvalidImage::Unsupported(_) => "unsupported_format",
            InvalidImage::Corrupt(_) => "corrupt",
        }
    }
}

const SUPPORTED: [ImageFormat; 4] = [ImageFormat::Png, ImageFormat::Jpeg, ImageFormat::Gif, ImageFormat::Bmp];

/// Fully decodes the bytes as PNG, JPEG, GIF or BMP.
pub fn validate_image(bytes: &[u8]) -> Result<ImageFormat, InvalidImage> {
    if bytes.is_empty() {
        return Err(InvalidImage::Empty);
    }
    let format = image::guess_format(bytes).map_err(|_| InvalidImage::UnknownFormat)?;
    if !SUPPORTED.contains(&format) {
        return Err(InvalidImage::Unsupported(format!("{format:?}")));
    }
    // the JPEG decoder pads short scans instead of failing
    let unpadded = bytes.iter().rposition(|&b| b != 0).map_or(&bytes[..0], |i| &bytes[..=i]);
    if format == ImageFormat::Jpeg && !unpadded.ends_with(&[0xFF, 0xD9]) {
        return Err(InvalidImage::Corrupt("missing end-of-image marker".into()));
    }
    let mut reader = ImageReader::new(Cursor::new(bytes));
    reader.set_format(format);
    reader
        .decode()
        .map_err(|e| InvalidImage::Corrupt(e.to_string()))?;
    Ok(format)
}

pub fn filter_valid_image(bytes: &[u8]) -> bool {
    validate_image(bytes).is_ok()
}

/// Optional near-duplicate detection on top of exact hashing.
///
/// Implementations map bytes to a fingerprint and decide when two
/// fingerprints are close enough to count as duplicates.
pub trait NearDuplicateHook: Send + Sync {
    fn fingerprint(&self, bytes: &[u8]) -> Option<u64>;

    fn is_match(&self, a: u64, b: u64) -> bool;
}

/// Global duplicate registry. First occurrence of a content hash wins.
#[derive(Default)]
pub struct Deduplicator {
    seen: HashSet<ContentHash>,
    near: Option<Box<dyn NearDuplicateHook>>,
    fingerprints: Vec<u64>,
    counts: StageCounts,
}

impl fmt::Debug for Deduplicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Deduplicator")
            .field("seen", &self.seen.len())
            .field("near_duplicate_hook", &self.near.is_some())
            .field("counts", &self.counts)
            .finish()
    }
}

impl Deduplicator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Turns on near-duplicate detection. Off by default.
    pub fn with_near_duplicate_hook(mut self, hook: Box<dyn NearDuplicateHook>) -> Self {
        self.near = Some(hook);
        self
    }

    pub fn fingerprint(&self, bytes: &[u8]) -> Option<u64> {
        self.near.as_ref().and_then(|h| h.fingerprint(bytes))
    }

    /// Whether an image would be rejected, without registering it.
    pub fn is_duplicate(&self, hash: &ContentHash, fingerprint: Option<u64>) -> bool {
        if self.seen.contains(hash) {
            return true;
        }
        match (&self.near, fingerprint) {
            (Some(hook), Some(fp)) => self.fingerprints.iter().any(|&other| hook.is_match(fp, other)),
            _ => false,
        }
    }

    /// Registers an image; returns `false` (and registers nothing) when it
    /// duplicates an earlier one.
    pub fn admit(&mut self, hash: ContentHash, fingerprint: Option<u64>) -> bool {
        if self.is_duplicate(&hash, fingerprint) {
            return false;
        }
        self.seen.insert(hash);
        if let (Some(_), Some(fp)) = (&self.near, fingerprint) {
            self.fingerprints.push(fp);
        }
        true
    }

    /// Deduplicates one node's images against everything seen so far.
    /// Survivors carry the `valid` and `unique` flags.
    pub fn dedup<B: AsRef<[u8]>>(
        &mut self,
        node: &NodeId,
        images: impl IntoIterator<Item = (B, String)>,
    ) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        for (bytes, locator) in images {
            let bytes = bytes.as_ref();
            let hash = ContentHash::of(bytes);
            let fp = self.fingerprint(bytes);
            let kept = self.admit(hash, fp);
            self.counts.record(kept);
            if kept {
                out.push(ImageRecord {
                    node: node.clone(),
                    content_hash: hash,
                    locator,
                    filter_flags: FilterFlags::VALID.with(FilterFlags::UNIQUE),
                });
            }
        }
        out
    }

    /// Counts over every image passed through [`Deduplicator::dedup`].
    pub fn counts(&self) -> StageCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// One-shot exact deduplication with a fresh registry.
pub fn dedup_images<B: AsRef<[u8]>>(
    node: &NodeId,
    images: impl IntoIterator<Item = (B, String)>,
) -> Vec<ImageRecord> {
    Deduplicator::new().dedup(node, images)
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{message}")]
pub struct ScorerError {
    pub message: String,
}

/// Scores how photographic an image is, in [0, 1] (1 = good photo).
pub trait QualityScorer {
    fn score(&self, bytes: &[u8], hash: &ContentHash) -> Result<f64, ScorerError>;
}

/// Gives every image the same score.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl QualityScorer for ConstantScorer {
    fn score(&self, _bytes: &[u8], _hash: &ContentHash) -> Result<f64, ScorerError> {
        Ok(self.0)
    }
}

/// Scores looked up by content hash, with a fallback for unlisted images.
#[derive(Debug, Clone, Default)]
pub struct TableScorer {
    scores: HashMap<ContentHash, f64>,
    default: Option<f64>,
}

impl TableScorer {
    pub fn new(default: Option<f64>) -> Self {
        TableScorer {
            scores: HashMap::new(),
            default,
        }
    }

    pub fn insert(&mut self, hash: ContentHash, score: f64) {
        self.scores.insert(hash, score);
    }

    pub fn with(mut self, hash: ContentHash, score: f64) -> Self {
        self.insert(hash, score);
        self
    }
}

impl QualityScorer for TableScorer {
    fn score(&self, _bytes: &[u8], hash: &ContentHash) -> Result<f64, ScorerError> {
        self.scores
            .get(hash)
            .copied()
            .or(self.default)
            .ok_or_else(|| ScorerError {
                message: "no score for image".into(),
            })
    }
}

impl<F> QualityScorer for F
where
    F: Fn(&[u8], &ContentHash) -> f64,
{
    fn score(&self, bytes: &[u8], hash: &ContentHash) -> Result<f64, ScorerError> {
        Ok(self(bytes, hash))
    }
}

/// Keeps the image iff its score is at least `threshold`.
pub fn filter_quality(
    bytes: &[u8],
    hash: &ContentHash,
    scorer: &dyn QualityScorer,
    threshold: f64,
) -> Result<bool, PipelineError> {
    let score = scorer.score(bytes, hash).map_err(|e| PipelineError::Scorer {
        hash: *hash,
        message: e.message,
    })?;
    quality_passes(score, threshold).map_err(|message| PipelineError::Scorer {
        hash: *hash,
        message,
    })
}

pub(crate) fn quality_passes(score: f64, threshold: f64) -> Result<bool, String> {
    if !(0.0..=1.0).contains(&score) {
        return Err(format!("score {score} outside [0, 1]"));
    }
    Ok(score >= threshold)
}

/// Keeps the image iff some gloss vector has a dot product strictly greater
/// than `threshold` with the image vector. No glosses means no match.
pub fn gloss_match(image: &[f32], glosses: &[Embedding], threshold: f64) -> Result<bool, EmbedError> {
    let mut best = f64::NEG_INFINITY;
    for g in glosses {
        best = best.max(dot(image, g.as_slice())?);
    }
    Ok(best > threshold)
}

/// Embeds the image and the node's English glosses and applies [`gloss_match`].
pub fn filter_gloss_match(
    bytes: &[u8],
    english_glosses: &[Gloss],
    embedder: &dyn EmbeddingProvider,
    threshold: f64,
) -> Result<bool, PipelineError> {
    let Some(first) = english_glosses.first() else {
        return Err(PipelineError::NoEnglishGloss(None));
    };
    if english_glosses.iter().any(|g| g.lang != Lang::En) {
        return Err(PipelineError::NoEnglishGloss(Some(first.node.clone())));
    }
    let image = embedder.embed_image(bytes)?;
    let glosses = english_glosses
        .iter()
        .map(|g| embedder.embed_text(&g.text, Some(Lang::En)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(gloss_match(image.as_slice(), &glosses, threshold)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embed::MockProvider;
    use image::{ImageBuffer, Rgb};

    pub(crate) fn png(seed: u32) -> Vec<u8> {
        let px = Rgb([(seed & 0xff) as u8, ((seed >> 8) & 0xff) as u8, ((seed >> 16) & 0xff) as u8]);
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(1, 1, px);
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
        out
    }

    fn jpeg() -> Vec<u8> {
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, 90]));
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Jpeg).unwrap();
        out
    }

    fn wav() -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(b"RIFF");
        w.extend_from_slice(&36u32.to_le_bytes());
        w.extend_from_slice(b"WAVEfmt ");
        w.extend_from_slice(&16u32.to_le_bytes());
        w.extend_from_slice(&[1, 0, 1, 0, 0x44, 0xac, 0, 0, 0x88, 0x58, 1, 0, 2, 0, 16, 0]);
        w.extend_from_slice(b"data");
        w.extend_from_slice(&0u32.to_le_bytes());
        w
    }

    #[test]
    fn validity_examples() {
        assert!(filter_valid_image(&png(7)));
        assert!(filter_valid_image(&jpeg()));
        assert!(!filter_valid_image(&wav()));
        let j = jpeg();
        assert!(!filter_valid_image(&j[..j.len() / 2]));
        assert!(!filter_valid_image(&j[..j.len() - 10]));
        let mut padded = j.clone();
        padded.extend([0u8; 16]);
        assert!(filter_valid_image(&padded));
        let p = png(7);
        assert!(!filter_valid_image(&p[..p.len() / 2]));
        assert_eq!(validate_image(b""), Err(InvalidImage::Empty));
        assert_eq!(validate_image(b"hello world"), Err(InvalidImage::UnknownFormat));
    }

    #[test]
    fn other_raster_formats() {
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_pixel(2, 2, Rgb([1, 2, 3]));
        for fmt in [ImageFormat::Gif, ImageFormat::Bmp] {
            let mut out = Vec::new();
            img.write_to(&mut Cursor::new(&mut out), fmt).unwrap();
            assert_eq!(validate_image(&out), Ok(fmt));
        }
    }

    #[test]
    fn dedup_examples() {
        let a = NodeId::new("a").unwrap();
        let (i1, i2) = (png(1), png(2));
        let out = dedup_images(
            &a,
            vec![(&i1, "x1".to_string()), (&i1, "x1b".to_string()), (&i2, "x2".to_string())],
        );
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].locator, "x1");
        assert!(dedup_images::<&[u8]>(&a, vec![]).is_empty());

        let mut d = Deduplicator::new();
        let b = NodeId::new("b").unwrap();
        assert_eq!(d.dedup(&a, vec![(&i1, "p".to_string())]).len(), 1);
        assert!(d.dedup(&b, vec![(&i1, "q".to_string())]).is_empty());
        let c = d.counts();
        assert_eq!((c.input, c.kept, c.removed), (2, 1, 1));
    }

    struct ModuloHook;
    impl NearDuplicateHook for ModuloHook {
        fn fingerprint(&self, bytes: &[u8]) -> Option<u64> {
            Some(bytes.len() as u64)
        }
        fn is_match(&self, a: u64, b: u64) -> bool {
            a == b
        }
    }

    #[test]
    fn near_duplicate_hook_is_opt_in() {
        let a = NodeId::new("a").unwrap();
        let imgs = || vec![(vec![1u8, 2], "x".to_string()), (vec![3u8, 4], "y".to_string())];
        assert_eq!(Deduplicator::new().dedup(&a, imgs()).len(), 2);
        let mut d = Deduplicator::new().with_near_duplicate_hook(Box::new(ModuloHook));
        assert_eq!(d.dedup(&a, imgs()).len(), 1);
    }

    #[test]
    fn quality_boundaries() {
        let h = ContentHash::of(b"x");
        let q = |s: f64| filter_quality(b"x", &h, &ConstantScorer(s), 0.5).unwrap();
        assert!(q(0.9));
        assert!(!q(0.49));
        assert!(q(0.5));
        assert!(matches!(
            filter_quality(b"x", &h, &ConstantScorer(1.5), 0.5),
            Err(PipelineError::Scorer { .. })
        ));
        assert!(matches!(
            filter_quality(b"x", &h, &TableScorer::new(None), 0.5),
            Err(PipelineError::Scorer { .. })
        ));
    }

    fn unit_at(dot_with_e0: f64) -> Embedding {
        let other = (1.0 - dot_with_e0 * dot_with_e0).sqrt();
        Embedding::new(vec![dot_with_e0 as f32, other as f32]).unwrap()
    }

    #[test]
    fn gloss_match_examples() {
        let img = [1.0f32, 0.0];
        assert!(gloss_match(&img, &[unit_at(0.3), unit_at(0.7)], 0.5).unwrap());
        assert!(!gloss_match(&img, &[unit_at(0.5)], 0.5).unwrap());
        assert!(!gloss_match(&img, &[], 0.5).unwrap());
        assert!(gloss_match(&img, &[Embedding::new(vec![1.0, 0.0, 0.0]).unwrap()], 0.5).is_err());
    }

    #[test]
    fn gloss_match_through_provider() {
        let node = NodeId::new("n").unwrap();
        let gloss = Gloss::new(node.clone(), Lang::En, "a dog").unwrap();
        let img = png(3);
        let p = MockProvider::new(2)
            .with_text("a dog", unit_at(0.7))
            .unwrap()
            .with_image(img.clone(), Embedding::new(vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(filter_gloss_match(&img, &[gloss], &p, 0.5).unwrap());
        assert!(matches!(
            filter_gloss_match(&img, &[], &p, 0.5),
            Err(PipelineError::NoEnglishGloss(None))
        ));
        let wide = MockProvider::new(3)
            .with_image(img.clone(), Embedding::new(vec![1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let narrow_gloss = Gloss::new(node, Lang::En, "a dog").unwrap();
        let mixed = MixedDims { image: wide, text: p };
        assert!(matches!(
            filter_gloss_match(&img, &[narrow_gloss], &mixed, 0.5),
            Err(PipelineError::DimensionMismatch { .. })
        ));
    }

    struct MixedDims {
        image: MockProvider,
        text: MockProvider,
    }

    impl EmbeddingProvider for MixedDims {
        fn dim(&self) -> usize {
            self.image.dim()
        }
        fn normalized(&self) -> bool {
            true
        }
        fn embed_text(&self, t: &str, l: Option<Lang>) -> Result<Embedding, crate::embed::ProviderError> {
            self.text.embed_text(t, l)
        }
        fn embed_image(&self, b: &[u8]) -> Result<Embedding, crate::embed::ProviderError> {
            self.image.embed_image(b)
        }
    }
}
