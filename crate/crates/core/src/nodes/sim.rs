//! The three tiers wired together on the discrete-event engine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::chunkwire::{encode_transfer, fragment};
use crate::domain::{FaceDatabase, ScenarioConfig, StageDurations, TransportKind};
use crate::metrics::{summarize, CoreTrace, MetricsError, MetricsRecord, RunSummary};
use crate::netsim::{EventQueue, SimCore, SimLink};
use crate::transport::{
    cloud_result_key, result_key, BlockingSession, KeyExpr, Publisher, PutReceipt, Router,
    KEY_CLOUD_RESULTS_PREFIX, KEY_FACES_DETECTED, KEY_RESULTS_PREFIX,
};
use crate::workload::{
    generate_face_db, jitter_factor, load_dataset_dir, plan_dataset, scaled, streams, Dataset,
    DatasetParams, IdentifyResult,
};

use super::{
    build_records, cloud_serve, edge_serve, CloudReply, CloudService, Decision, EdgeService,
    ImageTrace, Ingest, NodeError, ResultMessage,
};

/// Deliberate damage applied during a run, for exercising error paths.
#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Images whose first chunk goes out with a wrong checksum.
    pub corrupt_chunk: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub traces: Vec<ImageTrace>,
    pub core_traces: Vec<CoreTrace>,
    pub total_runtime: f64,
    pub events: usize,
    /// Bytes handed to the far edge → edge link, counted at the sender.
    pub far_link_bytes_offered: u64,
    pub far_link_bytes_sent: u64,
    pub far_link_busy: f64,
    pub duplicate_results: usize,
    /// Results that arrived after their image had timed out.
    pub late_results: usize,
    pub rejected_cloud_requests: usize,
}

impl RunOutput {
    pub fn summary(&self) -> Result<RunSummary, MetricsError> {
        summarize(&self.records, &self.core_traces, self.total_runtime)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Inbox {
    EdgeIngest,
    EdgeCloudResults,
    FarResults,
}

#[derive(Debug)]
enum Route {
    Keyed(KeyExpr),
    Direct(Inbox),
}

#[derive(Debug)]
enum Ev {
    IoReady,
    FramePushed(usize),
    AiReady,
    AiFree,
    SeqStart,
    DetectDone(usize),
    TryUpload(usize),
    Deliver { route: Route, bytes: Vec<u8> },
    EdgeIdentified(String),
    CloudInbox(Vec<u8>),
    EdgeGrant(Vec<u8>),
    CloudPublish { image_id: String, bytes: Vec<u8> },
    CloudDeadline(String),
    EdgeSendResult { image_id: String, bytes: Vec<u8> },
    ResultDeadline(usize),
}

enum Uplink {
    Blocking(BlockingSession),
    Pubsub { publisher: Publisher, key: KeyExpr },
}

enum Downlink {
    Blocking(BlockingSession),
    Pubsub(Publisher),
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    dataset: &'a Dataset,
    faults: &'a Faults,
    index: BTreeMap<String, usize>,
    traces: Vec<ImageTrace>,

    // far edge
    core0: SimCore,
    core1: SimCore,
    next_read: usize,
    frame_queue: VecDeque<usize>,
    io_busy: bool,
    io_blocked: bool,
    ai_busy: bool,
    uplink: Uplink,
    unsent: BTreeMap<usize, Vec<Vec<u8>>>,
    bytes_offered: u64,

    // edge
    edge: EdgeService,
    edge_core: SimCore,
    identified: BTreeMap<String, (Option<IdentifyResult>, Vec<u8>)>,
    downlink: Downlink,
    edge_to_cloud: SimLink,

    // cloud
    cloud: CloudService,
    cloud_to_edge: SimLink,

    router: Router<Inbox>,
    duplicate_results: usize,
    late_results: usize,
    rejected: usize,
}

type Step = Result<(), NodeError>;

fn transport_failure(reason: impl ToString) -> NodeError {
    NodeError::TransportFailure {
        reason: reason.to_string(),
        partial: Vec::new(),
    }
}

impl<'a> World<'a> {
    fn new(
        cfg: &'a ScenarioConfig,
        dataset: &'a Dataset,
        db: &FaceDatabase,
        faults: &'a Faults,
    ) -> Result<Self, NodeError> {
        let far = cfg.link_far_to_edge;
        let (uplink, downlink) = match cfg.transport {
            TransportKind::BlockingSession => (
                Uplink::Blocking(BlockingSession::new(SimLink::new(far), cfg.session_timeout)),
                Downlink::Blocking(BlockingSession::new(SimLink::new(far), cfg.session_timeout)),
            ),
            TransportKind::Pubsub => {
                let mut publisher = Publisher::new(SimLink::new(far), cfg.queue_capacity);
                let key = publisher
                    .declare(KEY_FACES_DETECTED)
                    .map_err(transport_failure)?;
                (
                    Uplink::Pubsub { publisher, key },
                    Downlink::Pubsub(Publisher::new(SimLink::new(far), cfg.queue_capacity)),
                )
            }
        };
        let mut router = Router::new();
        let subscribe = |r: &mut Router<Inbox>, pattern: String, inbox| {
            r.subscribe(&pattern, inbox)
                .map(|_| ())
                .map_err(transport_failure)
        };
        subscribe(
            &mut router,
            KEY_FACES_DETECTED.to_string(),
            Inbox::EdgeIngest,
        )?;
        subscribe(
            &mut router,
            format!("{KEY_CLOUD_RESULTS_PREFIX}/*"),
            Inbox::EdgeCloudResults,
        )?;
        subscribe(
            &mut router,
            format!("{KEY_RESULTS_PREFIX}/*"),
            Inbox::FarResults,
        )?;

        let features = dataset
            .images
            .iter()
            .filter_map(|s| s.embedding.clone().map(|e| (s.id.clone(), e)))
            .collect();
        let truth = dataset
            .images
            .iter()
            .map(|s| (s.id.clone(), s.ground_truth.clone()))
            .collect();
        let traces = dataset
            .images
            .iter()
            .map(|s| ImageTrace {
                image_id: s.id.clone(),
                has_face: s.has_face,
                ..Default::default()
            })
            .collect();
        Ok(Self {
            cfg,
            dataset,
            faults,
            index: dataset
                .images
                .iter()
                .map(|s| (s.id.clone(), s.index))
                .collect(),
            traces,
            core0: SimCore::new(0),
            core1: SimCore::new(1),
            next_read: 0,
            frame_queue: VecDeque::new(),
            io_busy: false,
            io_blocked: false,
            ai_busy: false,
            uplink,
            unsent: BTreeMap::new(),
            bytes_offered: 0,
            edge: edge_serve(cfg, db.clone(), features),
            edge_core: SimCore::new(0),
            identified: BTreeMap::new(),
            downlink,
            edge_to_cloud: SimLink::new(cfg.link_edge_to_cloud),
            cloud: cloud_serve(cfg, truth),
            cloud_to_edge: SimLink::new(cfg.link_edge_to_cloud),
            router,
            duplicate_results: 0,
            late_results: 0,
            rejected: 0,
        })
    }

    fn stages(&self, k: usize) -> StageDurations {
        let f = jitter_factor(
            self.cfg.rng_seed,
            streams::FAR_JITTER,
            k as u64,
            self.cfg.stage_jitter,
        );
        scaled(&self.cfg.stage_durations, f)
    }

    fn record_detection(&mut self, k: usize, d: &StageDurations) {
        let t = &mut self.traces[k];
        t.t_read_decode = d.t_read_decode;
        t.t_quality = d.t_quality;
        t.t_infer1 = d.t_infer1;
        t.t_infer2 = d.t_infer2;
    }

    fn handle(&mut self, q: &mut EventQueue<Ev>, now: f64, ev: Ev) -> Step {
        match ev {
            Ev::IoReady => self.io_ready(q, now),
            Ev::FramePushed(k) => {
                self.io_busy = false;
                self.frame_queue.push_back(k);
                schedule(q, now, Ev::AiReady);
                schedule(q, now, Ev::IoReady);
            }
            Ev::AiReady => self.ai_ready(q, now),
            Ev::AiFree => {
                self.ai_busy = false;
                schedule(q, now, Ev::AiReady);
            }
            Ev::SeqStart => self.seq_start(q, now),
            Ev::DetectDone(k) => {
                self.traces[k].detected_at = Some(now);
                if self.dataset.images[k].has_face {
                    self.try_upload(q, now, k)?;
                } else {
                    self.resume(q, now);
                }
            }
            Ev::TryUpload(k) => self.try_upload(q, now, k)?,
            Ev::Deliver { route, bytes } => match route {
                Route::Direct(inbox) => self.inbox(q, now, inbox, bytes)?,
                Route::Keyed(key) => {
                    let targets: Vec<Inbox> = self.router.matching(&key).map(|(_, h)| *h).collect();
                    for inbox in targets {
                        self.inbox(q, now, inbox, bytes.clone())?;
                    }
                }
            },
            Ev::EdgeIdentified(id) => {
                let (ident, payload) = self.identified.remove(&id).expect("identified image");
                match self.edge.decide(&id, ident.as_ref(), payload) {
                    Some(Decision::Reply(msg)) => self.send_result(q, now, id, msg.encode())?,
                    Some(Decision::Escalate { request }) => {
                        let tx = self.edge_to_cloud.transmit(now, request.len());
                        schedule(q, tx.delivered_at, Ev::CloudInbox(request));
                        schedule(q, now + self.cfg.cloud_timeout, Ev::CloudDeadline(id));
                    }
                    None => {}
                }
            }
            Ev::CloudInbox(bytes) => match self.cloud.handle(now, &bytes) {
                CloudReply::Grant(grant) => {
                    let tx = self.cloud_to_edge.transmit(now, grant.len());
                    schedule(q, tx.delivered_at, Ev::EdgeGrant(grant));
                }
                CloudReply::Result {
                    image_id,
                    bytes,
                    delay,
                } => {
                    schedule(q, now + delay, Ev::CloudPublish { image_id, bytes });
                }
                CloudReply::Rejected(_) => self.rejected += 1,
            },
            Ev::EdgeGrant(bytes) => {
                if let Some(upload) = self.edge.on_grant(&bytes) {
                    let tx = self.edge_to_cloud.transmit(now, upload.len());
                    schedule(q, tx.delivered_at, Ev::CloudInbox(upload));
                }
            }
            Ev::CloudPublish { image_id, bytes } => {
                let key =
                    KeyExpr::concrete(&cloud_result_key(&image_id)).map_err(transport_failure)?;
                let tx = self.cloud_to_edge.transmit(now, bytes.len());
                schedule(
                    q,
                    tx.delivered_at,
                    Ev::Deliver {
                        route: Route::Keyed(key),
                        bytes,
                    },
                );
            }
            Ev::CloudDeadline(id) => {
                if let Some(msg) = self.edge.cloud_timeout(&id) {
                    self.send_result(q, now, id, msg.encode())?;
                }
            }
            Ev::EdgeSendResult { image_id, bytes } => self.send_result(q, now, image_id, bytes)?,
            Ev::ResultDeadline(k) => {
                let t = &mut self.traces[k];
                if t.result.is_none() {
                    t.timed_out_at = Some(now);
                }
            }
        }
        Ok(())
    }

    fn io_ready(&mut self, q: &mut EventQueue<Ev>, now: f64) {
        if self.io_busy || self.next_read >= self.dataset.len() {
            return;
        }
        if self.frame_queue.len() >= self.cfg.queue_capacity {
            self.io_blocked = true;
            return;
        }
        let k = self.next_read;
        self.next_read += 1;
        self.io_busy = true;
        let d = self.stages(k);
        let (_, read_end) = self.core1.execute(now, d.t_read_decode);
        let (_, pushed) = self.core1.execute(read_end, d.t_pipeline_io);
        self.record_detection(k, &d);
        schedule(q, pushed, Ev::FramePushed(k));
    }

    fn ai_ready(&mut self, q: &mut EventQueue<Ev>, now: f64) {
        if self.ai_busy {
            return;
        }
        let Some(k) = self.frame_queue.pop_front() else {
            return;
        };
        self.ai_busy = true;
        if self.io_blocked {
            self.io_blocked = false;
            schedule(q, now, Ev::IoReady);
        }
        let d = self.stages(k);
        let det = crate::workload::detect(
            &self.dataset.images[k].id,
            self.dataset.images[k].has_face,
            &d,
            &mut self.core0,
            now + d.t_pipeline_sync,
        );
        schedule(q, det.finished_at, Ev::DetectDone(k));
    }

    fn seq_start(&mut self, q: &mut EventQueue<Ev>, now: f64) {
        if self.next_read >= self.dataset.len() {
            return;
        }
        let k = self.next_read;
        self.next_read += 1;
        let d = self.stages(k);
        let (_, read_end) = self.core1.execute(now, d.t_read_decode);
        let det = crate::workload::detect(
            &self.dataset.images[k].id,
            self.dataset.images[k].has_face,
            &d,
            &mut self.core1,
            read_end,
        );
        self.record_detection(k, &d);
        schedule(q, det.finished_at, Ev::DetectDone(k));
    }

    /// The detect→upload task is free for the next image.
    fn resume(&mut self, q: &mut EventQueue<Ev>, at: f64) {
        if self.cfg.parallelism {
            schedule(q, at, Ev::AiFree);
        } else {
            schedule(q, at, Ev::SeqStart);
        }
    }

    fn encode_image(&self, k: usize) -> Result<Vec<Vec<u8>>, NodeError> {
        let record = self.dataset.record(k);
        let (meta, mut chunks) = fragment(
            record.payload(),
            record.id(),
            self.cfg.chunk_size_bytes,
            (record.width_px(), record.height_px()),
            record.format().tag(),
        )?;
        if self.faults.corrupt_chunk.contains(record.id()) {
            chunks[0].crc32_chunk ^= 0xFFFF_FFFF;
        }
        Ok(encode_transfer(&meta, &chunks))
    }

    fn try_upload(&mut self, q: &mut EventQueue<Ev>, now: f64, k: usize) -> Step {
        let frames = match self.unsent.remove(&k) {
            Some(f) => f,
            None => self.encode_image(k)?,
        };
        let (start, end, resume_at) = match &mut self.uplink {
            Uplink::Pubsub { publisher, key } => {
                let lens: Vec<usize> = frames.iter().map(Vec::len).collect();
                match publisher.put(now, key, &lens).map_err(transport_failure)? {
                    PutReceipt::Full { retry_at } => {
                        self.unsent.insert(k, frames);
                        schedule(q, retry_at, Ev::TryUpload(k));
                        return Ok(());
                    }
                    PutReceipt::Enqueued { frames: timings } => {
                        let start = timings[0].start;
                        let end = timings[timings.len() - 1].delivered_at;
                        let key = key.clone();
                        for (bytes, t) in frames.into_iter().zip(&timings) {
                            self.bytes_offered += bytes.len() as u64;
                            let route = Route::Keyed(key.clone());
                            schedule(q, t.delivered_at, Ev::Deliver { route, bytes });
                        }
                        (start, end, if self.cfg.parallelism { now } else { end })
                    }
                }
            }
            Uplink::Blocking(session) => {
                let mut t = now;
                let mut start = None;
                for bytes in frames {
                    let r = session.send(t, bytes.len()).map_err(transport_failure)?;
                    start.get_or_insert(r.transmission.start);
                    self.bytes_offered += bytes.len() as u64;
                    let route = Route::Direct(Inbox::EdgeIngest);
                    schedule(q, r.transmission.delivered_at, Ev::Deliver { route, bytes });
                    t = r.acked_at;
                }
                (start.unwrap_or(now), t, t)
            }
        };
        let trace = &mut self.traces[k];
        trace.upload_start = Some(start);
        trace.upload_end = Some(end);
        schedule(q, end + self.cfg.result_timeout, Ev::ResultDeadline(k));
        self.resume(q, resume_at);
        Ok(())
    }

    fn inbox(&mut self, q: &mut EventQueue<Ev>, now: f64, inbox: Inbox, bytes: Vec<u8>) -> Step {
        match inbox {
            Inbox::EdgeIngest => match self.edge.on_frame(&bytes) {
                Ingest::Complete { image_id, payload } => {
                    let k = self.index[&image_id];
                    let f = jitter_factor(
                        self.cfg.rng_seed,
                        streams::EDGE_JITTER,
                        k as u64,
                        self.cfg.stage_jitter,
                    );
                    let t_identify = self.cfg.stage_durations.t_identify * f;
                    let (ident, done) = if self.edge.has_features(&image_id) {
                        let r =
                            self.edge
                                .identify(&image_id, &mut self.edge_core, t_identify, now)?;
                        self.traces[k].t_identify = Some(t_identify);
                        let done = r.finished_at;
                        (Some(r), done)
                    } else {
                        (None, now)
                    };
                    self.identified.insert(image_id.clone(), (ident, payload));
                    schedule(q, done, Ev::EdgeIdentified(image_id));
                }
                Ingest::Failed { image_id, .. } => {
                    if let Some(msg) = self.edge.negative(&image_id) {
                        self.send_result(q, now, image_id, msg.encode())?;
                    }
                }
                Ingest::Progress | Ingest::Ignored => {}
            },
            Inbox::EdgeCloudResults => {
                if let Some((image_id, fwd)) = self.edge.on_cloud_result(&bytes) {
                    self.send_result(q, now, image_id, fwd)?;
                }
            }
            Inbox::FarResults => {
                let Some(msg) = ResultMessage::decode(&bytes) else {
                    return Ok(());
                };
                let Some(&k) = self.index.get(&msg.image_id) else {
                    return Ok(());
                };
                let t = &mut self.traces[k];
                if t.result.is_some() {
                    self.duplicate_results += 1;
                } else if t.timed_out_at.is_some() {
                    self.late_results += 1;
                } else {
                    t.result = Some(msg);
                    t.result_at = Some(now);
                }
            }
        }
        Ok(())
    }

    fn send_result(
        &mut self,
        q: &mut EventQueue<Ev>,
        now: f64,
        image_id: String,
        bytes: Vec<u8>,
    ) -> Step {
        match &mut self.downlink {
            Downlink::Blocking(session) => {
                let r = session.send(now, bytes.len()).map_err(transport_failure)?;
                let route = Route::Direct(Inbox::FarResults);
                schedule(q, r.transmission.delivered_at, Ev::Deliver { route, bytes });
            }
            Downlink::Pubsub(publisher) => {
                let key = publisher
                    .declare(&result_key(&image_id))
                    .map_err(transport_failure)?;
                let receipt = publisher
                    .put(now, &key, &[bytes.len()])
                    .map_err(transport_failure)?;
                publisher.undeclare(&key);
                match receipt {
                    PutReceipt::Enqueued { frames } => {
                        let route = Route::Keyed(key);
                        schedule(q, frames[0].delivered_at, Ev::Deliver { route, bytes });
                    }
                    PutReceipt::Full { retry_at } => {
                        schedule(q, retry_at, Ev::EdgeSendResult { image_id, bytes });
                    }
                }
            }
        }
        Ok(())
    }

    fn far_link(&self) -> &SimLink {
        match &self.uplink {
            Uplink::Blocking(s) => s.link(),
            Uplink::Pubsub { publisher, .. } => publisher.link(),
        }
    }

    fn partial_records(&self) -> Vec<MetricsRecord> {
        let done: Vec<ImageTrace> = self
            .traces
            .iter()
            .filter(|t| t.completed_at().is_some())
            .cloned()
            .collect();
        build_records(&done).unwrap_or_default()
    }
}

fn schedule(q: &mut EventQueue<Ev>, at: f64, ev: Ev) {
    q.schedule_at(at.max(q.now()), ev)
        .expect("event times are finite");
}

/// Runs every image of `dataset` through far edge, edge and (when
/// enabled) cloud, returning one record per image.
pub fn far_edge_run(
    cfg: &ScenarioConfig,
    dataset: &Dataset,
    db: &FaceDatabase,
    faults: &Faults,
) -> Result<RunOutput, NodeError> {
    if dataset.is_empty() {
        return Err(NodeError::EmptyDataset);
    }
    let mut world = World::new(cfg, dataset, db, faults)?;
    let mut q = EventQueue::new();
    schedule(
        &mut q,
        0.0,
        if cfg.parallelism {
            Ev::IoReady
        } else {
            Ev::SeqStart
        },
    );
    let mut events = 0;
    while let Some((now, ev)) = q.pop_until(f64::INFINITY) {
        events += 1;
        if let Err(e) = world.handle(&mut q, now, ev) {
            return Err(match e {
                NodeError::TransportFailure { reason, .. } => NodeError::TransportFailure {
                    reason,
                    partial: world.partial_records(),
                },
                other => other,
            });
        }
    }
    let records = build_records(&world.traces)?;
    let total_runtime = records.iter().map(|r| r.completed_at).fold(0.0, f64::max);
    let link = world.far_link();
    Ok(RunOutput {
        records,
        core_traces: vec![
            CoreTrace {
                core_id: 0,
                busy_time: world.core0.busy_time(),
            },
            CoreTrace {
                core_id: 1,
                busy_time: world.core1.busy_time(),
            },
        ],
        total_runtime,
        events,
        far_link_bytes_offered: world.bytes_offered,
        far_link_bytes_sent: link.bytes_sent(),
        far_link_busy: link.busy_time(),
        duplicate_results: world.duplicate_results,
        late_results: world.late_results,
        rejected_cloud_requests: world.rejected,
        traces: world.traces,
    })
}

pub fn dataset_params(cfg: &ScenarioConfig) -> DatasetParams {
    DatasetParams {
        n: cfg.dataset_size,
        face_prob: cfg.face_prob,
        known_prob: cfg.known_prob,
        payload_bytes: cfg.payload_bytes,
        width_px: cfg.width_px,
        height_px: cfg.height_px,
    }
}

/// Gallery and dataset exactly as a run of `cfg` would use them.
pub fn build_inputs(cfg: &ScenarioConfig) -> Result<(FaceDatabase, Dataset), NodeError> {
    let db = generate_face_db(cfg.rng_seed, cfg.db_size);
    let dataset = match &cfg.dataset_dir {
        Some(dir) => {
            load_dataset_dir(dir.as_ref(), cfg.rng_seed, &db, cfg.width_px, cfg.height_px)?
        }
        None => plan_dataset(cfg.rng_seed, &dataset_params(cfg), &db)?,
    };
    Ok((db, dataset))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, NodeError> {
    let (db, dataset) = build_inputs(cfg)?;
    far_edge_run(cfg, &dataset, &db, &Faults::default())
}
