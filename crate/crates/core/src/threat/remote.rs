//! Line-delimited JSON recognition protocol over TCP: a blocking client and
//! a threaded mock service.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::classifier::{train_classifier, SurrogateClassifier, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{decode_png, encode_png, ImageTensor};

const UNENROLLED: &str = "unenrolled";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Enroll { id: i64, image_b64: String },
    Train,
    Identify { image_b64: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    fn ack() -> Self {
        Self {
            ok: true,
            ..Default::default()
        }
    }

    fn failure(msg: impl Into<String>) -> Self {
        Self {
            ok: false,
            error: Some(msg.into()),
            ..Default::default()
        }
    }
}

fn image_to_b64(img: &ImageTensor) -> Result<String> {
    Ok(STANDARD.encode(encode_png(img)?))
}

fn image_from_b64(s: &str) -> Result<ImageTensor> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::PngDecode(format!("base64: {e}")))?;
    decode_png(&bytes)
}

/// Blocking client; one connection per request, no retries.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    pub endpoint: String,
    pub timeout: Duration,
}

impl RemoteClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
        }
    }

    fn connect(&self) -> Result<TcpStream> {
        let addrs: Vec<SocketAddr> = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("resolve {}: {e}", self.endpoint)))?
            .collect();
        let mut last = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, self.timeout) {
                Ok(s) => {
                    s.set_read_timeout(Some(self.timeout))
                        .and_then(|_| s.set_write_timeout(Some(self.timeout)))
                        .map_err(|e| Error::Transport(e.to_string()))?;
                    return Ok(s);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Transport(match last {
            Some(e) => format!("connect {}: {e}", self.endpoint),
            None => format!("no address for {}", self.endpoint),
        }))
    }

    /// Sends one request and returns the parsed response; service-side
    /// failures become errors.
    pub fn request(&self, req: &Request) -> Result<Response> {
        let mut stream = self.connect()?;
        let mut line = serde_json::to_string(req).map_err(|e| Error::Transport(e.to_string()))?;
        line.push('\n');
        stream
            .write_all(line.as_bytes())
            .and_then(|_| stream.flush())
            .map_err(|e| Error::Transport(format!("send: {e}")))?;
        let mut reply = String::new();
        BufReader::new(stream)
            .read_line(&mut reply)
            .map_err(|e| Error::Transport(format!("receive: {e}")))?;
        if reply.is_empty() {
            return Err(Error::Transport("connection closed without a reply".into()));
        }
        let resp: Response = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::MalformedResponse(format!("{e}: {:?}", reply.trim_end())))?;
        if !resp.ok {
            return Err(match resp.error.as_deref() {
                Some(UNENROLLED) => Error::Unenrolled,
                Some(msg) => Error::Remote(msg.to_string()),
                None => Error::MalformedResponse("failure without an error message".into()),
            });
        }
        Ok(resp)
    }

    pub fn enroll(&self, id: i64, img: &ImageTensor) -> Result<()> {
        self.request(&Request::Enroll {
            id,
            image_b64: image_to_b64(img)?,
        })
        .map(|_| ())
    }

    pub fn train(&self) -> Result<()> {
        self.request(&Request::Train).map(|_| ())
    }

    /// Best matching identity and its confidence in `[0, 1]`.
    pub fn identify(&self, img: &ImageTensor) -> Result<(i64, f64)> {
        let resp = self.request(&Request::Identify {
            image_b64: image_to_b64(img)?,
        })?;
        match (resp.id, resp.confidence) {
            (Some(id), Some(c)) if (0.0..=1.0).contains(&c) => Ok((id, c)),
            (Some(_), Some(c)) => Err(Error::MalformedResponse(format!(
                "confidence {c} outside [0, 1]"
            ))),
            _ => Err(Error::MalformedResponse("identify reply lacks id or confidence".into())),
        }
    }
}

pub fn remote_enroll(client: &RemoteClient, id: i64, img: &ImageTensor) -> Result<()> {
    client.enroll(id, img)
}

pub fn remote_train(client: &RemoteClient) -> Result<()> {
    client.train()
}

pub fn remote_identify(client: &RemoteClient, img: &ImageTensor) -> Result<(i64, f64)> {
    client.identify(img)
}

/// What answers identify requests.
#[derive(Debug, Clone)]
pub enum MockBackend {
    /// A fixed pre-trained model; labels are its class indices and `train`
    /// is acknowledged without effect.
    Classifier(Arc<SurrogateClassifier>),
    /// Fits a classifier on the enrolled gallery when asked to train.
    Gallery(TrainConfig),
}

enum Fitted {
    Single(i64),
    Model {
        clf: SurrogateClassifier,
        ids: Vec<i64>,
    },
}

struct State {
    backend: MockBackend,
    gallery: Vec<(i64, ImageTensor)>,
    fitted: Option<Arc<Fitted>>,
}

impl State {
    fn distinct_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.gallery.iter().map(|(id, _)| *id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn fit(&self) -> Result<Option<Fitted>> {
        let cfg = match &self.backend {
            MockBackend::Classifier(_) => return Ok(None),
            MockBackend::Gallery(cfg) => cfg,
        };
        let ids = self.distinct_ids();
        match ids.len() {
            0 => Err(Error::Unenrolled),
            1 => Ok(Some(Fitted::Single(ids[0]))),
            k => {
                let train: Vec<(&ImageTensor, usize)> = self
                    .gallery
                    .iter()
                    .map(|(id, img)| (img, ids.binary_search(id).expect("enrolled id")))
                    .collect();
                let clf = train_classifier(&train, &[], k, cfg)?;
                Ok(Some(Fitted::Model { clf, ids }))
            }
        }
    }
}

fn handle(state: &RwLock<State>, line: &str) -> Response {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return Response::failure(format!("bad request: {e}")),
    };
    let result = match req {
        Request::Enroll { id, image_b64 } => image_from_b64(&image_b64).map(|img| {
            let mut s = state.write().expect("service state poisoned");
            s.gallery.push((id, img));
            s.fitted = None;
            Response::ack()
        }),
        Request::Train => {
            // fit outside the write lock so identify traffic keeps flowing
            let fitted = state.read().expect("service state poisoned").fit();
            fitted.map(|f| {
                state.write().expect("service state poisoned").fitted = f.map(Arc::new);
                Response::ack()
            })
        }
        Request::Identify { image_b64 } => {
            image_from_b64(&image_b64).and_then(|img| identify(state, &img))
        }
    };
    result.unwrap_or_else(|e| match e {
        Error::Unenrolled => Response::failure(UNENROLLED),
        other => Response::failure(other.to_string()),
    })
}

fn identify(state: &RwLock<State>, img: &ImageTensor) -> Result<Response> {
    let (backend, fitted, single) = {
        let s = state.read().expect("service state poisoned");
        if s.gallery.is_empty() {
            return Err(Error::Unenrolled);
        }
        let ids = s.distinct_ids();
        let single = (ids.len() == 1).then(|| ids[0]);
        (s.backend.clone(), s.fitted.clone(), single)
    };
    let (id, confidence) = match (&backend, fitted.as_deref(), single) {
        (MockBackend::Classifier(clf), _, _) => {
            let (label, p) = clf.identify(img)?;
            (label as i64, p)
        }
        (_, Some(Fitted::Model { clf, ids }), _) => {
            let (label, p) = clf.identify(img)?;
            (ids[label], p)
        }
        (_, Some(&Fitted::Single(id)), _) | (_, None, Some(id)) => (id, 1.0),
        (_, None, None) => {
            return Err(Error::Remote("gallery changed; send train before identify".into()))
        }
    };
    Ok(Response {
        ok: true,
        id: Some(id),
        confidence: Some(confidence),
        error: None,
    })
}

fn serve_connection(state: Arc<RwLock<State>>, stream: TcpStream) {
    let Ok(write_half) = stream.try_clone() else {
        return;
    };
    let mut writer = write_half;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { return };
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle(&state, line.trim());
        let mut out = serde_json::to_string(&resp).expect("response serializes");
        out.push('\n');
        if writer.write_all(out.as_bytes()).and_then(|_| writer.flush()).is_err() {
            return;
        }
    }
}

/// A running mock service. Dropping the handle shuts it down.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn client(&self) -> RemoteClient {
        RemoteClient::new(self.addr.to_string())
    }

    /// Stops accepting connections and releases the listening port.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some(t) = self.acceptor.take() {
            self.stop.store(true, Ordering::SeqCst);
            // wake the blocking accept
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves in background
/// threads, one per connection.
pub fn mock_service(backend: MockBackend, addr: &str) -> Result<ServiceHandle> {
    if let MockBackend::Classifier(clf) = &backend {
        if !clf.is_trained() {
            return Err(Error::Untrained);
        }
    }
    let listener =
        TcpListener::bind(addr).map_err(|e| Error::Transport(format!("bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Transport(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(RwLock::new(State {
        backend,
        gallery: Vec::new(),
        fitted: None,
    }));
    let flag = stop.clone();
    let acceptor = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            if let Ok(stream) = conn {
                let st = state.clone();
                std::thread::spawn(move || serve_connection(st, stream));
            }
        }
    });
    Ok(ServiceHandle {
        addr: local,
        stop,
        acceptor: Some(acceptor),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f64) -> ImageTensor {
        ImageTensor::filled(16, 16, 3, v).unwrap()
    }

    fn gallery() -> MockBackend {
        MockBackend::Gallery(TrainConfig {
            extractor: crate::perception::ExtractorSpec::randconv(1, 2),
            epochs: 20,
            ..Default::default()
        })
    }

    #[test]
    fn request_wire_format() {
        let r = Request::Enroll {
            id: 3,
            image_b64: "AA==".into(),
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"op":"enroll","id":3,"image_b64":"AA=="}"#
        );
        assert_eq!(serde_json::to_string(&Request::Train).unwrap(), r#"{"op":"train"}"#);
        assert_eq!(serde_json::to_string(&Response::ack()).unwrap(), r#"{"ok":true}"#);
        assert_eq!(
            serde_json::to_string(&Response::failure("x")).unwrap(),
            r#"{"ok":false,"error":"x"}"#
        );
    }

    #[test]
    fn single_identity_round_trip() {
        let svc = mock_service(gallery(), "127.0.0.1:0").unwrap();
        let c = svc.client();
        assert!(matches!(c.identify(&img(0.2)), Err(Error::Unenrolled)));
        c.enroll(42, &img(0.3)).unwrap();
        c.train().unwrap();
        for v in [0.0, 0.5, 1.0] {
            assert_eq!(c.identify(&img(v)).unwrap(), (42, 1.0));
        }
        svc.shutdown();
    }

    #[test]
    fn gallery_training_separates_two_identities() {
        let svc = mock_service(gallery(), "127.0.0.1:0").unwrap();
        let c = svc.client();
        for v in [0.1, 0.12, 0.14] {
            c.enroll(-5, &img(v)).unwrap();
        }
        for v in [0.86, 0.88, 0.9] {
            c.enroll(9, &img(v)).unwrap();
        }
        assert!(matches!(c.identify(&img(0.1)), Err(Error::Remote(_))));
        c.train().unwrap();
        assert_eq!(c.identify(&img(0.11)).unwrap().0, -5);
        assert_eq!(c.identify(&img(0.89)).unwrap().0, 9);
    }

    #[test]
    fn concurrent_identify_is_consistent() {
        let svc = mock_service(gallery(), "127.0.0.1:0").unwrap();
        let c = svc.client();
        c.enroll(1, &img(0.2)).unwrap();
        c.enroll(2, &img(0.8)).unwrap();
        c.train().unwrap();
        let want = c.identify(&img(0.4)).unwrap();
        let answers: Vec<_> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..8).map(|_| s.spawn(|| c.identify(&img(0.4)).unwrap())).collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(answers.iter().all(|a| a.0 == want.0 && a.1.to_bits() == want.1.to_bits()));
    }

    #[test]
    fn shutdown_releases_port() {
        let svc = mock_service(gallery(), "127.0.0.1:0").unwrap();
        let addr = svc.addr();
        svc.shutdown();
        let again = TcpListener::bind(addr);
        assert!(again.is_ok(), "{again:?}");
    }

    #[test]
    fn unreachable_endpoint_is_transport_error() {
        // bind then drop to find a port with nothing listening
        let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let c = RemoteClient::new(addr.to_string());
        assert!(matches!(c.train(), Err(Error::Transport(_))));
    }

    #[test]
    fn malformed_reply_is_distinct_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let t = std::thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut line = String::new();
            r.read_line(&mut line).unwrap();
            let mut w = s;
            w.write_all(b"not json\n").unwrap();
        });
        let c = RemoteClient::new(addr.to_string());
        assert!(matches!(c.train(), Err(Error::MalformedResponse(_))));
        t.join().unwrap();
    }

    #[test]
    fn untrained_backend_rejected() {
        let clf = SurrogateClassifier::untrained(TrainConfig::default(), 3).unwrap();
        let r = mock_service(MockBackend::Classifier(Arc::new(clf)), "127.0.0.1:0");
        assert!(matches!(r, Err(Error::Untrained)));
    }
}
