//! Wall-clock mode: each tier runs in its own threads and talks to the
//! others only over loopback TCP. Stage costs become sleeps scaled by
//! `time_scale`; reported times are divided by the same factor so they
//! stay comparable with virtual runs.
//!
//! Frame layout: `kind: u8`, `key_len: u16 BE`, `body_len: u32 BE`, key,
//! body. Kind 0 carries data, kind 1 acknowledges one data frame.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::chunkwire::{encode_transfer, fragment};
use crate::domain::{FaceDatabase, ScenarioConfig, StageDurations, TransportKind};
use crate::metrics::CoreTrace;
use crate::netsim::SimCore;
use crate::transport::{
    cloud_result_key, match_key, result_key, KeyExpr, TransportError, KEY_CLOUD_RESULTS_PREFIX,
    KEY_FACES_DETECTED, KEY_RESULTS_PREFIX,
};
use crate::workload::{jitter_factor, scaled, streams, Dataset};

use super::sim::{build_inputs, RunOutput};
use super::{
    build_records, cloud_serve, edge_serve, CloudReply, Decision, ImageTrace, Ingest, NodeError,
    ResultMessage,
};

const KIND_DATA: u8 = 0;
const KIND_ACK: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub key: String,
    pub body: Vec<u8>,
}

pub fn write_frame(w: &mut impl Write, kind: u8, key: &str, body: &[u8]) -> io::Result<()> {
    let key_len = u16::try_from(key.len()).map_err(|_| io::Error::other("key too long"))?;
    let body_len = u32::try_from(body.len()).map_err(|_| io::Error::other("body too long"))?;
    let mut buf = Vec::with_capacity(7 + key.len() + body.len());
    buf.push(kind);
    buf.extend_from_slice(&key_len.to_be_bytes());
    buf.extend_from_slice(&body_len.to_be_bytes());
    buf.extend_from_slice(key.as_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// `None` on a clean end of stream before a frame starts.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Frame>> {
    let mut head = [0u8; 7];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let key_len = u16::from_be_bytes([head[1], head[2]]) as usize;
    let body_len = u32::from_be_bytes([head[3], head[4], head[5], head[6]]) as usize;
    let mut key = vec![0u8; key_len];
    r.read_exact(&mut key)?;
    let mut body = vec![0u8; body_len];
    r.read_exact(&mut body)?;
    let key = String::from_utf8(key).map_err(|_| io::Error::other("key is not utf-8"))?;
    Ok(Some(Frame {
        kind: head[0],
        key,
        body,
    }))
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

fn shared_writer(stream: &TcpStream) -> io::Result<SharedWriter> {
    Ok(Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?))))
}

fn send(w: &SharedWriter, kind: u8, key: &str, body: &[u8]) -> io::Result<()> {
    let mut guard = w.lock().map_err(|_| io::Error::other("writer poisoned"))?;
    write_frame(&mut *guard, kind, key, body)
}

/// Converts between scaled wall time and model seconds.
#[derive(Debug, Clone, Copy)]
struct Clock {
    start: Instant,
    scale: f64,
}

impl Clock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64() / self.scale
    }

    fn sleep(&self, model_seconds: f64) {
        if model_seconds > 0.0 {
            thread::sleep(Duration::from_secs_f64(model_seconds * self.scale));
        }
    }

    fn wall(&self, model_seconds: f64) -> Duration {
        Duration::from_secs_f64((model_seconds * self.scale).max(0.0))
    }
}

fn io_failure(e: impl ToString) -> NodeError {
    NodeError::TransportFailure {
        reason: e.to_string(),
        partial: Vec::new(),
    }
}

fn spawn_cloud(
    listener: TcpListener,
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    clock: Clock,
) -> JoinHandle<io::Result<()>> {
    let truth = dataset
        .images
        .iter()
        .map(|s| (s.id.clone(), s.ground_truth.clone()))
        .collect();
    let mut cloud = cloud_serve(cfg, truth);
    thread::spawn(move || {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let writer = shared_writer(&stream)?;
        let mut reader = BufReader::new(stream);
        let mut timers = Vec::new();
        while let Some(frame) = read_frame(&mut reader)? {
            match cloud.handle(clock.now(), &frame.body) {
                CloudReply::Grant(bytes) => send(&writer, KIND_DATA, "", &bytes)?,
                CloudReply::Result {
                    image_id,
                    bytes,
                    delay,
                } => {
                    let writer = Arc::clone(&writer);
                    timers.push(thread::spawn(move || {
                        clock.sleep(delay);
                        send(&writer, KIND_DATA, &cloud_result_key(&image_id), &bytes)
                    }));
                }
                CloudReply::Rejected(_) => {}
            }
        }
        for t in timers {
            let _ = t.join();
        }
        Ok(())
    })
}

enum EdgeInput {
    Far(Frame),
    Cloud(Frame),
    FarClosed,
}

fn spawn_reader(
    stream: TcpStream,
    tx: Sender<EdgeInput>,
    wrap: fn(Frame) -> EdgeInput,
    ack: Option<SharedWriter>,
) -> JoinHandle<()> {
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        while let Ok(Some(frame)) = read_frame(&mut reader) {
            if frame.kind == KIND_DATA {
                if let Some(w) = &ack {
                    if send(w, KIND_ACK, "", &[]).is_err() {
                        break;
                    }
                }
            }
            if tx.send(wrap(frame)).is_err() {
                break;
            }
        }
        let _ = tx.send(EdgeInput::FarClosed);
    })
}

fn spawn_edge(
    listener: TcpListener,
    cloud_port: u16,
    cfg: &ScenarioConfig,
    db: &FaceDatabase,
    dataset: &Dataset,
    clock: Clock,
    identify_log: Sender<(String, f64)>,
) -> JoinHandle<io::Result<()>> {
    let features = dataset
        .images
        .iter()
        .filter_map(|s| s.embedding.clone().map(|e| (s.id.clone(), e)))
        .collect();
    let index: BTreeMap<String, usize> = dataset
        .images
        .iter()
        .map(|s| (s.id.clone(), s.index))
        .collect();
    let mut edge = edge_serve(cfg, db.clone(), features);
    let cfg = cfg.clone();
    thread::spawn(move || {
        let (far, _) = listener.accept()?;
        far.set_nodelay(true)?;
        let cloud = TcpStream::connect(("127.0.0.1", cloud_port))?;
        cloud.set_nodelay(true)?;
        let far_writer = shared_writer(&far)?;
        let cloud_writer = shared_writer(&cloud)?;
        let blocking = cfg.transport == TransportKind::BlockingSession;

        let (tx, rx) = mpsc::channel();
        let far_reader = spawn_reader(
            far.try_clone()?,
            tx.clone(),
            EdgeInput::Far,
            blocking.then(|| Arc::clone(&far_writer)),
        );
        let cloud_reader = spawn_reader(cloud.try_clone()?, tx, EdgeInput::Cloud, None);
        let faces = KeyExpr::concrete(KEY_FACES_DETECTED).expect("valid key");
        let cloud_results =
            KeyExpr::parse(&format!("{KEY_CLOUD_RESULTS_PREFIX}/*")).expect("valid key");
        let mut deadlines: BTreeMap<String, Instant> = BTreeMap::new();
        let mut core = SimCore::new(0);

        loop {
            let wait = deadlines
                .values()
                .min()
                .map(|d| d.saturating_duration_since(Instant::now()));
            let input = match wait {
                Some(w) => rx.recv_timeout(w),
                None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
            };
            let mut replies: Vec<(String, Vec<u8>)> = Vec::new();
            match input {
                Ok(EdgeInput::Far(frame)) => {
                    let keyed = KeyExpr::concrete(&frame.key).ok();
                    if frame.kind != KIND_DATA
                        || !(blocking || keyed.is_some_and(|k| match_key(&faces, &k)))
                    {
                        continue;
                    }
                    match edge.on_frame(&frame.body) {
                        Ingest::Complete { image_id, payload } => {
                            let k = index.get(&image_id).copied().unwrap_or(0) as u64;
                            let f = jitter_factor(
                                cfg.rng_seed,
                                streams::EDGE_JITTER,
                                k,
                                cfg.stage_jitter,
                            );
                            let t_identify = cfg.stage_durations.t_identify * f;
                            let ident = if edge.has_features(&image_id) {
                                clock.sleep(t_identify);
                                let _ = identify_log.send((image_id.clone(), t_identify));
                                edge.identify(&image_id, &mut core, t_identify, 0.0).ok()
                            } else {
                                None
                            };
                            match edge.decide(&image_id, ident.as_ref(), payload) {
                                Some(Decision::Reply(msg)) => {
                                    replies.push((image_id, msg.encode()))
                                }
                                Some(Decision::Escalate { request }) => {
                                    send(&cloud_writer, KIND_DATA, "", &request)?;
                                    deadlines.insert(
                                        image_id,
                                        Instant::now() + clock.wall(cfg.cloud_timeout),
                                    );
                                }
                                None => {}
                            }
                        }
                        Ingest::Failed { image_id, .. } => {
                            if let Some(msg) = edge.negative(&image_id) {
                                replies.push((image_id, msg.encode()));
                            }
                        }
                        Ingest::Progress | Ingest::Ignored => {}
                    }
                }
                Ok(EdgeInput::Cloud(frame)) => {
                    let routed = KeyExpr::concrete(&frame.key)
                        .ok()
                        .is_some_and(|k| match_key(&cloud_results, &k));
                    if routed {
                        if let Some((image_id, fwd)) = edge.on_cloud_result(&frame.body) {
                            deadlines.remove(&image_id);
                            replies.push((image_id, fwd));
                        }
                    } else if let Some(upload) = edge.on_grant(&frame.body) {
                        send(&cloud_writer, KIND_DATA, "", &upload)?;
                    }
                }
                Ok(EdgeInput::FarClosed) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {
                    let now = Instant::now();
                    let due: Vec<String> = deadlines
                        .iter()
                        .filter(|(_, d)| **d <= now)
                        .map(|(id, _)| id.clone())
                        .collect();
                    for id in due {
                        deadlines.remove(&id);
                        if let Some(msg) = edge.cloud_timeout(&id) {
                            replies.push((id, msg.encode()));
                        }
                    }
                }
            }
            for (image_id, bytes) in replies {
                send(&far_writer, KIND_DATA, &result_key(&image_id), &bytes)?;
            }
        }
        let _ = cloud.shutdown(Shutdown::Both);
        let _ = far.shutdown(Shutdown::Both);
        let _ = far_reader.join();
        let _ = cloud_reader.join();
        Ok(())
    })
}

struct Outgoing {
    k: usize,
    frames: Vec<Vec<u8>>,
    done: Option<Sender<()>>,
}

struct FarShared {
    traces: Mutex<Vec<ImageTrace>>,
    duplicates: Mutex<usize>,
}

struct FarEdge {
    cfg: ScenarioConfig,
    dataset: Dataset,
    clock: Clock,
    shared: Arc<FarShared>,
    writer: SharedWriter,
    acks: Mutex<Receiver<()>>,
    publisher: Mutex<Option<SyncSender<Outgoing>>>,
}

impl FarEdge {
    fn stages(&self, k: usize) -> StageDurations {
        let f = jitter_factor(
            self.cfg.rng_seed,
            streams::FAR_JITTER,
            k as u64,
            self.cfg.stage_jitter,
        );
        scaled(&self.cfg.stage_durations, f)
    }

    fn encode(&self, k: usize) -> Result<Vec<Vec<u8>>, NodeError> {
        let r = self.dataset.record(k);
        let (meta, chunks) = fragment(
            r.payload(),
            r.id(),
            self.cfg.chunk_size_bytes,
            (r.width_px(), r.height_px()),
            r.format().tag(),
        )?;
        Ok(encode_transfer(&meta, &chunks))
    }

    fn trace<T>(&self, k: usize, f: impl FnOnce(&mut ImageTrace) -> T) -> T {
        f(&mut self.shared.traces.lock().expect("trace lock")[k])
    }

    /// Read and detect on the calling thread; returns whether to upload.
    fn detect(&self, k: usize, d: &StageDurations) -> bool {
        self.clock.sleep(d.detection_total());
        let now = self.clock.now();
        self.trace(k, |t| {
            t.t_read_decode = d.t_read_decode;
            t.t_quality = d.t_quality;
            t.t_infer1 = d.t_infer1;
            t.t_infer2 = d.t_infer2;
            t.detected_at = Some(now);
        });
        self.dataset.images[k].has_face
    }

    fn upload(&self, k: usize, wait_for_delivery: bool) -> Result<(), NodeError> {
        let frames = self.encode(k)?;
        let link = self.cfg.link_far_to_edge;
        let publisher = self.publisher.lock().expect("publisher lock").clone();
        match publisher {
            Some(tx) => {
                let (done_tx, done_rx) = mpsc::channel();
                let done = wait_for_delivery.then_some(done_tx);
                tx.send(Outgoing { k, frames, done })
                    .map_err(|_| io_failure(TransportError::QueueClosed))?;
                if wait_for_delivery {
                    done_rx
                        .recv()
                        .map_err(|_| io_failure(TransportError::QueueClosed))?;
                }
            }
            None => {
                let acks = self.acks.lock().expect("ack lock");
                let start = self.clock.now();
                let timeout = self.clock.wall(self.cfg.session_timeout);
                for f in &frames {
                    self.clock
                        .sleep(f.len() as f64 / link.bandwidth + 2.0 * link.latency);
                    send(&self.writer, KIND_DATA, KEY_FACES_DETECTED, f).map_err(io_failure)?;
                    acks.recv_timeout(timeout).map_err(|_| {
                        io_failure(TransportError::Timeout(self.cfg.session_timeout))
                    })?;
                }
                let end = self.clock.now();
                self.trace(k, |t| {
                    t.upload_start = Some(start);
                    t.upload_end = Some(end);
                });
            }
        }
        Ok(())
    }
}

fn spawn_publisher(far: Arc<FarEdge>, rx: Receiver<Outgoing>) -> JoinHandle<io::Result<()>> {
    thread::spawn(move || {
        let link = far.cfg.link_far_to_edge;
        for msg in rx {
            let start = far.clock.now();
            far.clock.sleep(link.latency);
            for f in &msg.frames {
                far.clock.sleep(f.len() as f64 / link.bandwidth);
                send(&far.writer, KIND_DATA, KEY_FACES_DETECTED, f)?;
            }
            let end = far.clock.now();
            far.trace(msg.k, |t| {
                t.upload_start = Some(start);
                t.upload_end = Some(end);
            });
            if let Some(done) = msg.done {
                let _ = done.send(());
            }
        }
        Ok(())
    })
}

fn spawn_far_reader(
    stream: TcpStream,
    far: Arc<FarEdge>,
    index: BTreeMap<String, usize>,
    ack_tx: Sender<()>,
    results_tx: Sender<()>,
) -> JoinHandle<()> {
    let results = KeyExpr::parse(&format!("{KEY_RESULTS_PREFIX}/*")).expect("valid key");
    thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        while let Ok(Some(frame)) = read_frame(&mut reader) {
            if frame.kind == KIND_ACK {
                let _ = ack_tx.send(());
                continue;
            }
            if !KeyExpr::concrete(&frame.key).is_ok_and(|k| match_key(&results, &k)) {
                continue;
            }
            let Some(msg) = ResultMessage::decode(&frame.body) else {
                continue;
            };
            let Some(&k) = index.get(&msg.image_id) else {
                continue;
            };
            let now = far.clock.now();
            let fresh = far.trace(k, |t| {
                if t.result.is_some() {
                    false
                } else {
                    t.result = Some(msg);
                    t.result_at = Some(now);
                    true
                }
            });
            if fresh {
                let _ = results_tx.send(());
            } else {
                *far.shared.duplicates.lock().expect("dup lock") += 1;
            }
        }
    })
}

fn far_edge_main(far: Arc<FarEdge>, busy: &mut [f64; 2]) -> Result<usize, NodeError> {
    let n = far.dataset.len();
    let mut uploaded = 0;
    if far.cfg.parallelism {
        let cap = far.cfg.queue_capacity.max(1);
        let (frame_tx, frame_rx) = mpsc::sync_channel::<usize>(cap - 1);
        let io = {
            let far = Arc::clone(&far);
            thread::spawn(move || {
                for k in 0..n {
                    let d = far.stages(k);
                    far.clock.sleep(d.t_read_decode + d.t_pipeline_io);
                    if frame_tx.send(k).is_err() {
                        break;
                    }
                }
            })
        };
        for k in frame_rx {
            let d = far.stages(k);
            busy[1] += d.t_read_decode + d.t_pipeline_io;
            far.clock.sleep(d.t_pipeline_sync);
            busy[0] += d.detection_total();
            if far.detect(k, &d) {
                far.upload(k, false)?;
                uploaded += 1;
            }
        }
        let _ = io.join();
    } else {
        for k in 0..n {
            let d = far.stages(k);
            far.clock.sleep(d.t_read_decode);
            busy[1] += d.t_read_decode + d.detection_total();
            if far.detect(k, &d) {
                far.upload(k, true)?;
                uploaded += 1;
            }
        }
    }
    Ok(uploaded)
}

/// Runs `cfg` with real threads and sockets on the loopback interface.
pub fn run_tcp(cfg: &ScenarioConfig) -> Result<RunOutput, NodeError> {
    let (db, dataset) = build_inputs(cfg)?;
    if dataset.is_empty() {
        return Err(NodeError::EmptyDataset);
    }
    let clock = Clock {
        start: Instant::now(),
        scale: cfg.time_scale,
    };
    let cloud_listener = TcpListener::bind(("127.0.0.1", cfg.tcp_port_cloud))?;
    let edge_listener = TcpListener::bind(("127.0.0.1", cfg.tcp_port_edge))?;
    let cloud_port = cloud_listener.local_addr()?.port();
    let edge_port = edge_listener.local_addr()?.port();

    let cloud = spawn_cloud(cloud_listener, cfg, &dataset, clock);
    let (id_tx, id_rx) = mpsc::channel();
    let edge = spawn_edge(edge_listener, cloud_port, cfg, &db, &dataset, clock, id_tx);

    let stream = TcpStream::connect(("127.0.0.1", edge_port))?;
    stream.set_nodelay(true)?;
    let traces = dataset
        .images
        .iter()
        .map(|s| ImageTrace {
            image_id: s.id.clone(),
            has_face: s.has_face,
            ..Default::default()
        })
        .collect();
    let index: BTreeMap<String, usize> = dataset
        .images
        .iter()
        .map(|s| (s.id.clone(), s.index))
        .collect();
    let (ack_tx, ack_rx) = mpsc::channel();
    let (pub_tx, pub_rx) = match cfg.transport {
        TransportKind::Pubsub => {
            let (tx, rx) = mpsc::sync_channel(cfg.queue_capacity.max(1) - 1);
            (Some(tx), Some(rx))
        }
        TransportKind::BlockingSession => (None, None),
    };
    let far = Arc::new(FarEdge {
        cfg: cfg.clone(),
        dataset,
        clock,
        shared: Arc::new(FarShared {
            traces: Mutex::new(traces),
            duplicates: Mutex::new(0),
        }),
        writer: shared_writer(&stream)?,
        acks: Mutex::new(ack_rx),
        publisher: Mutex::new(pub_tx),
    });
    let publisher = pub_rx.map(|rx| spawn_publisher(Arc::clone(&far), rx));
    let (results_tx, results_rx) = mpsc::channel();
    let reader = spawn_far_reader(
        stream.try_clone()?,
        Arc::clone(&far),
        index,
        ack_tx,
        results_tx,
    );

    let mut busy = [0.0; 2];
    let outcome = far_edge_main(Arc::clone(&far), &mut busy);
    let uploaded = match &outcome {
        Ok(u) => *u,
        Err(_) => 0,
    };
    // Wait for every uploaded image's result or its timeout.
    let deadline = Instant::now() + clock.wall(cfg.result_timeout) + Duration::from_secs(1);
    let mut received = 0;
    while received < uploaded {
        match results_rx.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(()) => received += 1,
            Err(_) => break,
        }
    }
    let end = clock.now();
    // Closing the queue lets the publisher thread drain and exit.
    far.publisher.lock().expect("publisher lock").take();
    let far_owned = far;
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader.join();
    if let Some(p) = publisher {
        let _ = p.join();
    }
    let _ = edge
        .join()
        .map_err(|_| io_failure("edge thread panicked"))?;
    let _ = cloud
        .join()
        .map_err(|_| io_failure("cloud thread panicked"))?;

    let mut traces = far_owned.shared.traces.lock().expect("trace lock").clone();
    for t in traces
        .iter_mut()
        .filter(|t| t.has_face && t.result.is_none())
    {
        t.timed_out_at = Some(end);
    }
    for (id, t_identify) in id_rx.try_iter() {
        if let Some(t) = traces.iter_mut().find(|t| t.image_id == id) {
            t.t_identify = Some(t_identify);
        }
    }
    if let Err(e) = outcome {
        let done: Vec<ImageTrace> = traces
            .iter()
            .filter(|t| t.result.is_some() || !t.has_face)
            .cloned()
            .collect();
        return Err(match e {
            NodeError::TransportFailure { reason, .. } => NodeError::TransportFailure {
                reason,
                partial: build_records(&done).unwrap_or_default(),
            },
            other => other,
        });
    }
    let records = build_records(&traces)?;
    let total_runtime = records
        .iter()
        .map(|r| r.completed_at)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let duplicate_results = *far_owned.shared.duplicates.lock().expect("dup lock");
    Ok(RunOutput {
        records,
        traces,
        core_traces: vec![
            CoreTrace {
                core_id: 0,
                busy_time: busy[0],
            },
            CoreTrace {
                core_id: 1,
                busy_time: busy[1],
            },
        ],
        total_runtime,
        events: 0,
        far_link_bytes_offered: 0,
        far_link_bytes_sent: 0,
        far_link_busy: 0.0,
        duplicate_results,
        late_results: 0,
        rejected_cloud_requests: 0,
    })
}
