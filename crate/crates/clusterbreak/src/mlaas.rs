//! Mock album-clustering web service with a label-only API, plus clients.
//!
//! Endpoint contract: POST /createAlbum, POST /addimage, POST /groupFace,
//! GET /getAlbumDetail?token=… — JSON bodies, base64-encoded pixel payloads,
//! error envelope {code, message}. The backend embeds album images with a
//! freshly trained autoencoder and groups them by average-linkage
//! agglomerative clustering cut at the largest merge-distance gap, so the
//! group count is inferred, never requested. Soft memberships are never
//! exposed.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::train_autoencoder;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// album persistence directory; None keeps albums in memory only
    pub storage_dir: Option<PathBuf>,
    pub backend_seed: u64,
    /// maximum request rate; requests beyond it are delayed, not rejected
    pub rate_limit_per_sec: Option<f64>,
    pub max_payload_bytes: usize,
    pub embed_dim: usize,
    pub ae_epochs: usize,
}

impl Default for ServiceConfig {
    fn default() -> ServiceConfig {
        ServiceConfig {
            storage_dir: None,
            backend_seed: 0,
            rate_limit_per_sec: None,
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            embed_dim: 8,
            ae_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredImage {
    pub id: u64,
    pub shape: (usize, usize, usize),
    pub pixels: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Album {
    pub token: String,
    pub images: Vec<StoredImage>,
    pub group_ids: Option<Vec<usize>>,
    next_image_id: u64,
}

impl Album {
    fn new(token: String) -> Album {
        Album { token, images: Vec::new(), group_ids: None, next_image_id: 0 }
    }
}

/// Average-linkage agglomerative clustering; the merge sequence is cut at the
/// largest gap in the merge-distance profile (including the zero baseline),
/// so the number of groups is inferred from the data.
pub fn agglomerative_largest_gap(embeddings: &Array2<f64>) -> Vec<usize> {
    let n = embeddings.nrows();
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let mut pair = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pair[[i, j]] = d;
            pair[[j, i]] = d;
        }
    }
    // full merge sequence
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges: Vec<(f64, Vec<Vec<usize>>)> = Vec::new();
    let mut distances = Vec::new();
    while clusters.len() > 1 {
        let (mut bi, mut bj, mut bd) = (0, 1, f64::INFINITY);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut total = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        total += pair[[a, b]];
                    }
                }
                let d = total / (clusters[i].len() * clusters[j].len()) as f64;
                if d < bd {
                    bd = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        let merged_into = clusters.remove(bj);
        clusters[bi].extend(merged_into);
        distances.push(bd);
        merges.push((bd, clusters.clone()));
    }
    // cut at the largest consecutive gap, with a leading zero baseline
    let mut best_gap = distances[0];
    let mut applied = 0usize; // number of merges kept
    for i in 1..distances.len() {
        let gap = distances[i] - distances[i - 1];
        if gap > best_gap {
            best_gap = gap;
            applied = i;
        }
    }
    let partition: Vec<Vec<usize>> = if applied == 0 {
        (0..n).map(|i| vec![i]).collect()
    } else {
        merges[applied - 1].1.clone()
    };
    let mut labels = vec![0usize; n];
    for (g, members) in partition.iter().enumerate() {
        for &m in members {
            labels[m] = g;
        }
    }
    normalize_labels(&labels)
}

/// Relabels to consecutive integers from 0 in order of first appearance.
fn normalize_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    let mut next = 0usize;
    labels
        .iter()
        .map(|&l| {
            *map.entry(l).or_insert_with(|| {
                let v = next;
                next += 1;
                v
            })
        })
        .collect()
}

/// The service proper: albums behind a single lock (per-album operations are
/// serialized; grouping commits atomically under it).
pub struct MlaasService {
    config: ServiceConfig,
    albums: Mutex<HashMap<String, Album>>,
    token_counter: AtomicU64,
    last_request: Mutex<Option<Instant>>,
}

impl MlaasService {
    /// Opens the service, loading any persisted albums from the storage dir.
    pub fn open(config: ServiceConfig) -> Result<MlaasService> {
        let mut albums = HashMap::new();
        if let Some(dir) = &config.storage_dir {
            std::fs::create_dir_all(dir)?;
            for entry in std::fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let album: Album = serde_json::from_reader(std::io::BufReader::new(
                        std::fs::File::open(&path)?,
                    ))?;
                    albums.insert(album.token.clone(), album);
                }
            }
        }
        let count = albums.len() as u64;
        Ok(MlaasService {
            config,
            albums: Mutex::new(albums),
            token_counter: AtomicU64::new(count),
            last_request: Mutex::new(None),
        })
    }

    fn throttle(&self) {
        if let Some(rate) = self.config.rate_limit_per_sec {
            let min_gap = Duration::from_secs_f64(1.0 / rate);
            let mut last = self.last_request.lock().unwrap();
            if let Some(prev) = *last {
                let elapsed = prev.elapsed();
                if elapsed < min_gap {
                    std::thread::sleep(min_gap - elapsed);
                }
            }
            *last = Some(Instant::now());
        }
    }

    fn persist(&self, album: &Album) -> Result<()> {
        if let Some(dir) = &self.config.storage_dir {
            let path = dir.join(format!("{}.json", album.token));
            let tmp = dir.join(format!("{}.json.tmp", album.token));
            serde_json::to_writer(std::io::BufWriter::new(std::fs::File::create(&tmp)?), album)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok(())
    }

    pub fn create_album(&self) -> Result<String> {
        self.throttle();
        let ordinal = self.token_counter.fetch_add(1, Ordering::SeqCst);
        let mut hasher = Sha256::new();
        hasher.update(self.config.backend_seed.to_le_bytes());
        hasher.update(ordinal.to_le_bytes());
        let digest = hasher.finalize();
        let token = base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(&digest[..16]);
        let album = Album::new(token.clone());
        self.persist(&album)?;
        self.albums.lock().unwrap().insert(token.clone(), album);
        Ok(token)
    }

    pub fn add_image(&self, token: &str, image: &Array3<f64>) -> Result<u64> {
        self.throttle();
        let bytes = image.len() * std::mem::size_of::<f32>();
        if bytes > self.config.max_payload_bytes {
            return Err(Error::PayloadTooLarge { got: bytes, limit: self.config.max_payload_bytes });
        }
        let shape = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let mut albums = self.albums.lock().unwrap();
        let album = albums.get_mut(token).ok_or(Error::UnknownToken)?;
        if let Some(first) = album.images.first() {
            if first.shape != shape {
                return Err(Error::shape(format!("{:?}", first.shape), format!("{shape:?}")));
            }
        }
        let id = album.next_image_id;
        album.next_image_id += 1;
        album.images.push(StoredImage {
            id,
            shape,
            pixels: image.iter().map(|&v| v as f32).collect(),
        });
        album.group_ids = None; // new content invalidates any prior grouping
        self.persist(album)?;
        Ok(id)
    }

    pub fn group_face(&self, token: &str) -> Result<()> {
        self.throttle();
        let images: Array4<f64> = {
            let albums = self.albums.lock().unwrap();
            let album = albums.get(token).ok_or(Error::UnknownToken)?;
            if album.images.is_empty() {
                return Err(Error::EmptyAlbum);
            }
            let (c, h, w) = album.images[0].shape;
            let mut arr = Array4::<f64>::zeros((album.images.len(), c, h, w));
            for (i, img) in album.images.iter().enumerate() {
                for (slot, &v) in arr
                    .index_axis_mut(Axis(0), i)
                    .iter_mut()
                    .zip(img.pixels.iter())
                {
                    *slot = v as f64;
                }
            }
            arr
        };
        // grouping runs outside the lock; the labels commit atomically below
        let labels = if images.shape()[0] == 1 {
            vec![0]
        } else {
            let encoder = train_autoencoder(
                &images,
                self.config.embed_dim,
                self.config.ae_epochs,
                32,
                2e-3,
                self.config.backend_seed,
            );
            let z = encoder
                .infer(&images.into_dyn())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            agglomerative_largest_gap(&z)
        };
        let mut albums = self.albums.lock().unwrap();
        let album = albums.get_mut(token).ok_or(Error::UnknownToken)?;
        if album.images.len() != labels.len() {
            // album changed while grouping ran; caller should regroup
            return Err(Error::NotGrouped);
        }
        album.group_ids = Some(labels);
        self.persist(album)?;
        Ok(())
    }

    pub fn get_album_detail(&self, token: &str) -> Result<Vec<(u64, usize)>> {
        self.throttle();
        let albums = self.albums.lock().unwrap();
        let album = albums.get(token).ok_or(Error::UnknownToken)?;
        let groups = album.group_ids.as_ref().ok_or(Error::NotGrouped)?;
        Ok(album
            .images
            .iter()
            .zip(groups.iter())
            .map(|(img, &g)| (img.id, g))
            .collect())
    }
}

/// The label-only interface both the in-process handle and the HTTP client
/// implement; §-style clients never see soft memberships because the service
/// has none to give.
pub trait AlbumClusteringClient: Send + Sync {
    fn create_album(&self) -> Result<String>;
    fn add_image(&self, token: &str, image: &Array3<f64>) -> Result<u64>;
    fn group_face(&self, token: &str) -> Result<()>;
    fn get_album_detail(&self, token: &str) -> Result<Vec<(u64, usize)>>;
}

pub struct InProcessClient {
    pub service: Arc<MlaasService>,
}

impl AlbumClusteringClient for InProcessClient {
    fn create_album(&self) -> Result<String> {
        self.service.create_album()
    }
    fn add_image(&self, token: &str, image: &Array3<f64>) -> Result<u64> {
        self.service.add_image(token, image)
    }
    fn group_face(&self, token: &str) -> Result<()> {
        self.service.group_face(token)
    }
    fn get_album_detail(&self, token: &str) -> Result<Vec<(u64, usize)>> {
        self.service.get_album_detail(token)
    }
}

// ---- wire types ----

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateAlbumResponse {
    pub facealbum_token: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AddImageRequest {
    pub token: String,
    pub shape: (usize, usize, usize),
    pub pixels_b64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AddImageResponse {
    pub image_id: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupFaceRequest {
    pub token: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlbumDetailEntry {
    pub image_id: u64,
    pub group_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlbumDetailResponse {
    pub entries: Vec<AlbumDetailEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub code: u16,
    pub message: String,
}

pub fn encode_pixels(image: &Array3<f64>) -> String {
    let mut bytes = Vec::with_capacity(image.len() * 4);
    for &v in image.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_pixels(shape: (usize, usize, usize), b64: &str) -> Result<Array3<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| Error::invalid("pixels_b64", e.to_string()))?;
    let (c, h, w) = shape;
    if bytes.len() != c * h * w * 4 {
        return Err(Error::shape(format!("{} bytes", c * h * w * 4), format!("{}", bytes.len())));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array3::from_shape_vec((c, h, w), vals).map_err(|e| Error::invalid("shape", e.to_string()))
}

fn status_for(err: &Error) -> u16 {
    match err {
        Error::UnknownToken => 404,
        Error::NotGrouped => 409,
        Error::PayloadTooLarge { .. } => 413,
        Error::EmptyAlbum | Error::ShapeMismatch { .. } | Error::InvalidParameter { .. } => 400,
        _ => 500,
    }
}

// ---- HTTP layer (axum) ----

mod http {
    use super::*;
    use axum::extract::{Query, State};
    use axum::http::StatusCode;
    use axum::response::{IntoResponse, Response};
    use axum::routing::{get, post};
    use axum::{Json, Router};

    fn err_response(err: Error) -> Response {
        let code = status_for(&err);
        let envelope = ErrorEnvelope { code, message: err.to_string() };
        (StatusCode::from_u16(code).unwrap(), Json(envelope)).into_response()
    }

    async fn create_album(State(svc): State<Arc<MlaasService>>) -> Response {
        match svc.create_album() {
            Ok(facealbum_token) => Json(CreateAlbumResponse { facealbum_token }).into_response(),
            Err(e) => err_response(e),
        }
    }

    async fn add_image(
        State(svc): State<Arc<MlaasService>>,
        Json(req): Json<AddImageRequest>,
    ) -> Response {
        let image = match decode_pixels(req.shape, &req.pixels_b64) {
            Ok(i) => i,
            Err(e) => return err_response(e),
        };
        match svc.add_image(&req.token, &image) {
            Ok(image_id) => Json(AddImageResponse { image_id }).into_response(),
            Err(e) => err_response(e),
        }
    }

    async fn group_face(
        State(svc): State<Arc<MlaasService>>,
        Json(req): Json<GroupFaceRequest>,
    ) -> Response {
        match svc.group_face(&req.token) {
            Ok(()) => Json(serde_json::json!({"ok": true})).into_response(),
            Err(e) => err_response(e),
        }
    }

    async fn album_detail(
        State(svc): State<Arc<MlaasService>>,
        Query(params): Query<HashMap<String, String>>,
    ) -> Response {
        let Some(token) = params.get("token") else {
            return err_response(Error::invalid("token", "missing query parameter"));
        };
        match svc.get_album_detail(token) {
            Ok(entries) => Json(AlbumDetailResponse {
                entries: entries
                    .into_iter()
                    .map(|(image_id, group_id)| AlbumDetailEntry { image_id, group_id })
                    .collect(),
            })
            .into_response(),
            Err(e) => err_response(e),
        }
    }

    pub fn router(service: Arc<MlaasService>) -> Router {
        Router::new()
            .route("/createAlbum", post(create_album))
            .route("/addimage", post(add_image))
            .route("/groupFace", post(group_face))
            .route("/getAlbumDetail", get(album_detail))
            .with_state(service)
    }
}

pub use http::router;

/// Binds and serves on a background thread; returns the bound address.
pub fn spawn_http_server(service: Arc<MlaasService>, addr: SocketAddr) -> Result<SocketAddr> {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = match tokio::net::TcpListener::bind(addr).await {
                Ok(l) => l,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            let local = listener.local_addr().unwrap();
            let _ = tx.send(Ok(local));
            axum::serve(listener, router(service)).await.ok();
        });
    });
    rx.recv()
        .map_err(|_| Error::Service { code: 500, message: "server thread died".into() })?
        .map_err(Error::Io)
}

/// Blocking HTTP client with retry-once semantics on transport failures.
pub struct HttpAlbumClient {
    base: String,
    client: reqwest::blocking::Client,
}

impl HttpAlbumClient {
    pub fn new(base: impl Into<String>) -> HttpAlbumClient {
        HttpAlbumClient {
            base: base.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn run<T: for<'de> Deserialize<'de>>(
        &self,
        build: impl Fn(&reqwest::blocking::Client) -> reqwest::blocking::RequestBuilder,
    ) -> Result<T> {
        let mut last_err = None;
        for _ in 0..2 {
            match build(&self.client).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<T>().map_err(|e| Error::Service {
                            code: 500,
                            message: e.to_string(),
                        });
                    }
                    let envelope: ErrorEnvelope = resp.json().unwrap_or(ErrorEnvelope {
                        code: status.as_u16(),
                        message: "unparseable error body".into(),
                    });
                    if status.is_server_error() {
                        last_err = Some(Error::Service { code: envelope.code, message: envelope.message });
                        continue; // retry once
                    }
                    return Err(Error::Service { code: envelope.code, message: envelope.message });
                }
                Err(e) => {
                    last_err = Some(Error::Service { code: 500, message: e.to_string() });
                }
            }
        }
        Err(last_err.unwrap())
    }
}

impl AlbumClusteringClient for HttpAlbumClient {
    fn create_album(&self) -> Result<String> {
        let base = self.base.clone();
        let resp: CreateAlbumResponse =
            self.run(move |c| c.post(format!("{base}/createAlbum")))?;
        Ok(resp.facealbum_token)
    }

    fn add_image(&self, token: &str, image: &Array3<f64>) -> Result<u64> {
        let req = AddImageRequest {
            token: token.to_string(),
            shape: (image.shape()[0], image.shape()[1], image.shape()[2]),
            pixels_b64: encode_pixels(image),
        };
        let base = self.base.clone();
        let resp: AddImageResponse =
            self.run(move |c| c.post(format!("{base}/addimage")).json(&req))?;
        Ok(resp.image_id)
    }

    fn group_face(&self, token: &str) -> Result<()> {
        let req = GroupFaceRequest { token: token.to_string() };
        let base = self.base.clone();
        let _: serde_json::Value = self.run(move |c| c.post(format!("{base}/groupFace")).json(&req))?;
        Ok(())
    }

    fn get_album_detail(&self, token: &str) -> Result<Vec<(u64, usize)>> {
        let base = self.base.clone();
        let token = token.to_string();
        let resp: AlbumDetailResponse = self.run(move |c| {
            c.get(format!("{base}/getAlbumDetail")).query(&[("token", token.as_str())])
        })?;
        Ok(resp.entries.into_iter().map(|e| (e.image_id, e.group_id)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_image_dataset;

    fn service() -> Arc<MlaasService> {
        Arc::new(MlaasService::open(ServiceConfig::default()).unwrap())
    }

    fn album_image(ds: &crate::data::Dataset, i: usize) -> Array3<f64> {
        ds.images().index_axis(Axis(0), i).to_owned()
    }

    #[test]
    fn tokens_are_distinct_url_safe_and_albums_start_empty() {
        let svc = service();
        let a = svc.create_album().unwrap();
        let b = svc.create_album().unwrap();
        assert_ne!(a, b);
        for t in [&a, &b] {
            assert!(t.len() >= 16);
            assert!(t.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'));
        }
        assert!(matches!(svc.get_album_detail(&a), Err(Error::NotGrouped)));
        assert!(matches!(svc.group_face(&a), Err(Error::EmptyAlbum)));
    }

    #[test]
    fn add_image_contract() {
        let svc = service();
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 4.0, 0).unwrap();
        let token = svc.create_album().unwrap();
        let mut ids = std::collections::HashSet::new();
        for i in 0..ds.n() {
            ids.insert(svc.add_image(&token, &album_image(&ds, i)).unwrap());
        }
        assert_eq!(ids.len(), ds.n());
        // duplicate content is allowed with a fresh id
        let dup = svc.add_image(&token, &album_image(&ds, 0)).unwrap();
        assert!(!ids.contains(&dup));
        assert!(matches!(
            svc.add_image("nope", &album_image(&ds, 0)),
            Err(Error::UnknownToken)
        ));
    }

    #[test]
    fn payload_limit_is_enforced() {
        let svc = Arc::new(
            MlaasService::open(ServiceConfig { max_payload_bytes: 32, ..Default::default() })
                .unwrap(),
        );
        let token = svc.create_album().unwrap();
        let big = Array3::<f64>::zeros((1, 8, 8));
        assert!(matches!(
            svc.add_image(&token, &big),
            Err(Error::PayloadTooLarge { .. })
        ));
    }

    #[test]
    fn grouping_separated_identities_is_pure_and_stable() {
        let svc = service();
        let ds = make_synthetic_image_dataset(5, 2, 1, 6, 6, 8.0, 1).unwrap();
        let token = svc.create_album().unwrap();
        for i in 0..ds.n() {
            svc.add_image(&token, &album_image(&ds, i)).unwrap();
        }
        svc.group_face(&token).unwrap();
        let detail = svc.get_album_detail(&token).unwrap();
        assert_eq!(detail.len(), ds.n());
        // normalized consecutive ids from 0
        let max = detail.iter().map(|&(_, g)| g).max().unwrap();
        for g in 0..=max {
            assert!(detail.iter().any(|&(_, gg)| gg == g));
        }
        // pure membership per identity
        assert_eq!(max + 1, 2);
        for (i, &(_, g)) in detail.iter().enumerate() {
            let same_class: Vec<usize> = (0..ds.n()).filter(|&j| ds.labels()[j] == ds.labels()[i]).collect();
            for j in same_class {
                assert_eq!(detail[j].1, g, "identity split across groups");
            }
        }
        // stable across repeated reads
        assert_eq!(detail, svc.get_album_detail(&token).unwrap());
    }

    #[test]
    fn single_image_is_one_group_and_regrouping_is_idempotent() {
        let svc = service();
        let ds = make_synthetic_image_dataset(3, 2, 1, 4, 4, 6.0, 2).unwrap();
        let token = svc.create_album().unwrap();
        svc.add_image(&token, &album_image(&ds, 0)).unwrap();
        svc.group_face(&token).unwrap();
        assert_eq!(svc.get_album_detail(&token).unwrap(), vec![(0, 0)]);
        // adding images invalidates the grouping until regrouped
        svc.add_image(&token, &album_image(&ds, 1)).unwrap();
        assert!(matches!(svc.get_album_detail(&token), Err(Error::NotGrouped)));
        svc.group_face(&token).unwrap();
        assert_eq!(svc.get_album_detail(&token).unwrap().len(), 2);
    }

    #[test]
    fn identical_albums_group_identically() {
        let ds = make_synthetic_image_dataset(4, 2, 1, 5, 5, 6.0, 3).unwrap();
        let mut labelings = Vec::new();
        for _ in 0..2 {
            let svc = service();
            let token = svc.create_album().unwrap();
            for i in 0..ds.n() {
                svc.add_image(&token, &album_image(&ds, i)).unwrap();
            }
            svc.group_face(&token).unwrap();
            labelings.push(svc.get_album_detail(&token).unwrap());
        }
        assert_eq!(labelings[0], labelings[1]);
    }

    #[test]
    fn albums_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let config = ServiceConfig {
            storage_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let ds = make_synthetic_image_dataset(3, 2, 1, 4, 4, 6.0, 4).unwrap();
        let token;
        let detail;
        {
            let svc = MlaasService::open(config.clone()).unwrap();
            token = svc.create_album().unwrap();
            for i in 0..ds.n() {
                svc.add_image(&token, &album_image(&ds, i)).unwrap();
            }
            svc.group_face(&token).unwrap();
            detail = svc.get_album_detail(&token).unwrap();
        }
        let reopened = MlaasService::open(config).unwrap();
        assert_eq!(reopened.get_album_detail(&token).unwrap(), detail);
    }

    #[test]
    fn pixel_codec_round_trips() {
        let ds = make_synthetic_image_dataset(2, 2, 1, 4, 4, 4.0, 5).unwrap();
        let img = album_image(&ds, 0);
        let decoded = decode_pixels((1, 4, 4), &encode_pixels(&img)).unwrap();
        for (a, b) in img.iter().zip(decoded.iter()) {
            assert!((a - b).abs() < 1e-6); // f32 wire precision
        }
        assert!(decode_pixels((1, 4, 4), "AAAA").is_err());
    }

    #[test]
    fn http_round_trip_matches_in_process() {
        let dsvc = service();
        let addr = spawn_http_server(dsvc.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
        let client = HttpAlbumClient::new(format!("http://{addr}"));
        let ds = make_synthetic_image_dataset(4, 2, 1, 5, 5, 6.0, 6).unwrap();
        let token = client.create_album().unwrap();
        for i in 0..ds.n() {
            client.add_image(&token, &album_image(&ds, i)).unwrap();
        }
        client.group_face(&token).unwrap();
        let via_http = client.get_album_detail(&token).unwrap();
        let direct = dsvc.get_album_detail(&token).unwrap();
        assert_eq!(via_http, direct);
        // error envelope paths
        match client.get_album_detail("missing") {
            Err(Error::Service { code, .. }) => assert_eq!(code, 404),
            other => panic!("expected 404 envelope, got {other:?}"),
        }
        match client.group_face(&client.create_album().unwrap()) {
            Err(Error::Service { code, .. }) => assert_eq!(code, 400),
            other => panic!("expected 400 envelope, got {other:?}"),
        }
    }
}
