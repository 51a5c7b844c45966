use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use super::{BinaryMask, Image, ImageSample};
use crate::error::{Error, Result};

/// Source of pixel data for manifest rows.
pub trait SampleStore: Send + Sync {
    fn image(&self, sample: &ImageSample) -> Result<Image>;
    fn gt_mask(&self, sample: &ImageSample) -> Result<Option<BinaryMask>>;
    /// The unperturbed live image a synthetic spoof was rendered from.
    fn base_live(&self, sample: &ImageSample) -> Result<Option<Image>>;
}

#[derive(Debug, Clone)]
pub struct StoredSample {
    pub image: Image,
    pub gt_mask: Option<BinaryMask>,
    pub base_live: Option<Image>,
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryStore {
    entries: HashMap<String, StoredSample>,
}

impl InMemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, entry: StoredSample) {
        self.entries.insert(sample_id.into(), entry);
    }

    pub fn get(&self, sample_id: &str) -> Option<&StoredSample> {
        self.entries.get(sample_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, sample: &ImageSample) -> Result<&StoredSample> {
        self.entries
            .get(&sample.sample_id)
            .ok_or_else(|| Error::Data(format!("no pixels stored for `{}`", sample.sample_id)))
    }
}

impl SampleStore for InMemoryStore {
    fn image(&self, sample: &ImageSample) -> Result<Image> {
        Ok(self.entry(sample)?.image.clone())
    }

    fn gt_mask(&self, sample: &ImageSample) -> Result<Option<BinaryMask>> {
        Ok(self.entry(sample)?.gt_mask.clone())
    }

    fn base_live(&self, sample: &ImageSample) -> Result<Option<Image>> {
        Ok(self.entry(sample)?.base_live.clone())
    }
}

/// Records every file a [`DiskStore`] opens.
#[derive(Debug, Default)]
pub struct AccessRecorder {
    paths: Mutex<Vec<PathBuf>>,
}

impl AccessRecorder {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn record(&self, path: &Path) {
        self.paths.lock().unwrap().push(path.to_path_buf());
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        self.paths.lock().unwrap().clone()
    }

    pub fn count_matching(&self, pred: impl Fn(&Path) -> bool) -> usize {
        self.paths.lock().unwrap().iter().filter(|p| pred(p)).count()
    }
}

/// PNG-backed store rooted at a directory; manifest paths are relative to it.
/// Base live images of synthetic spoofs live under `base/<sample_id>.png`.
#[derive(Debug)]
pub struct DiskStore {
    root: PathBuf,
    recorder: Option<Arc<AccessRecorder>>,
    cache: Mutex<HashMap<PathBuf, Image>>,
}

impl DiskStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            recorder: None,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_recorder(mut self, recorder: Arc<AccessRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read(&self, rel: &Path) -> Result<Vec<u8>> {
        let path = self.root.join(rel);
        if let Some(r) = &self.recorder {
            r.record(&path);
        }
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    fn cached_image(&self, rel: &Path) -> Result<Image> {
        if let Some(img) = self.cache.lock().unwrap().get(rel) {
            return Ok(img.clone());
        }
        let img = Image::from_png(&self.read(rel)?)?;
        self.cache.lock().unwrap().insert(rel.to_path_buf(), img.clone());
        Ok(img)
    }

    pub fn base_path(sample_id: &str) -> PathBuf {
        Path::new("base").join(format!("{sample_id}.png"))
    }
}

impl SampleStore for DiskStore {
    fn image(&self, sample: &ImageSample) -> Result<Image> {
        self.cached_image(&sample.path)
    }

    fn gt_mask(&self, sample: &ImageSample) -> Result<Option<BinaryMask>> {
        match &sample.gt_mask_path {
            None => Ok(None),
            Some(p) => Ok(Some(BinaryMask::from_png(&self.read(p)?)?)),
        }
    }

    fn base_live(&self, sample: &ImageSample) -> Result<Option<Image>> {
        let rel = Self::base_path(&sample.sample_id);
        if !self.root.join(&rel).exists() {
            return Ok(None);
        }
        self.cached_image(&rel).map(Some)
    }
}
