//! Live probe service: one evolving colony per WebSocket connection, driven by JSON
//! `{type, seq, payload}` messages.
//!
//! Commands are acknowledged with `{type: "ack", seq}` (echoing the command's `seq`) or
//! `{type: "error", seq, reason}`. Frames are `{type: "frame", seq, payload}` where `seq`
//! counts frames on this connection without gaps.

use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use cellseg_core::analysis::iou;
use cellseg_core::data::perturb::{shift_image, shift_label, Rect};
use cellseg_core::data::{LabelMask, Sample};
use cellseg_core::model::argmax_classes;
use cellseg_core::render::{image_to_rgb, png_bytes, prediction_rgb, rgb_to_image, unit_to_rgb};
use cellseg_core::{state_rgb, Automaton, Purpose, RngStream, StepDraws, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeMessage {
    #[serde(rename = "type")]
    pub kind: String,
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ProbeMessage {
    pub fn command(kind: &str, seq: u64, payload: Value) -> Self {
        ProbeMessage { kind: kind.into(), seq: Some(seq), payload, reason: None }
    }

    fn ack(seq: Option<u64>, command: &str) -> Self {
        ProbeMessage { kind: "ack".into(), seq, payload: json!({ "command": command }), reason: None }
    }

    fn error(seq: Option<u64>, reason: impl Into<String>) -> Self {
        ProbeMessage { kind: "error".into(), seq, payload: Value::Null, reason: Some(reason.into()) }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    SetImage { image: String },
    Shift { dx: i64, dy: i64 },
    GrayRegion { x: usize, y: usize, w: usize, h: usize },
    ResetStateRegion { x: usize, y: usize, w: usize, h: usize },
    Pause,
    Resume,
    Step { n: usize },
    SetRate { sps: f64 },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SetImage { .. } => "set_image",
            Command::Shift { .. } => "shift",
            Command::GrayRegion { .. } => "gray_region",
            Command::ResetStateRegion { .. } => "reset_state_region",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::Step { .. } => "step",
            Command::SetRate { .. } => "set_rate",
        }
    }
}

/// Splits a text message into its `seq` and command.
pub fn parse_command(text: &str) -> (Option<u64>, Result<Command, String>) {
    let mut doc: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return (None, Err(format!("malformed JSON: {e}"))),
    };
    let Some(obj) = doc.as_object_mut() else {
        return (None, Err("message must be a JSON object".into()));
    };
    let seq = obj.remove("seq").and_then(|s| s.as_u64());
    if seq.is_none() {
        return (None, Err("missing or invalid `seq`".into()));
    }
    // Unit commands may carry an empty or null payload.
    if matches!(obj.get("payload"), Some(Value::Null)) || obj.get("payload").is_some_and(|p| p.as_object().is_some_and(|m| m.is_empty())) {
        let kind = obj.get("type").and_then(Value::as_str).unwrap_or_default();
        if matches!(kind, "pause" | "resume") {
            obj.remove("payload");
        }
    }
    (seq, serde_json::from_value(doc).map_err(|e| format!("bad command: {e}")))
}

/// What a command asks of the driving loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Effect {
    None,
    Steps(usize),
}

pub struct Session {
    model: Arc<Automaton<f32>>,
    seed: u64,
    image: Tensor<f32>,
    label: Option<LabelMask>,
    env: Tensor<f32>,
    state: Tensor<f32>,
    step: u64,
    resets: u64,
    pub paused: bool,
    pub sps: f64,
    mean_gate: Option<f64>,
}

fn b64_png(img: &image::RgbImage) -> String {
    B64.encode(png_bytes(img))
}

impl Session {
    pub fn new(model: Arc<Automaton<f32>>, sample: &Sample, seed: u64) -> cellseg_core::Result<Self> {
        let (h, w) = sample.extent();
        let image = sample.image.clone().reshape([1, h, w, 3])?;
        let env = model.environment(&image)?;
        let mut rng = RngStream::for_purpose(seed, Purpose::State).path(&[0]);
        let state = model.init_state(&image, &mut rng)?;
        Ok(Session {
            model,
            seed,
            image,
            label: Some(sample.label.clone()),
            env,
            state,
            step: 0,
            resets: 0,
            paused: false,
            sps: 20.0,
            mean_gate: None,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &Tensor<f32> {
        &self.state
    }

    fn extent(&self) -> (usize, usize) {
        let d = self.image.shape().dims();
        (d[1], d[2])
    }

    /// Applies `cmd`; on error the session is untouched.
    pub fn apply(&mut self, cmd: &Command) -> Result<Effect, String> {
        let (h, w) = self.extent();
        match *cmd {
            Command::SetImage { ref image } => {
                let bytes = B64.decode(image).map_err(|e| format!("bad base64: {e}"))?;
                let img = image::load_from_memory(&bytes).map_err(|e| format!("bad image: {e}"))?.to_rgb8();
                let img = if img.dimensions() == (w as u32, h as u32) {
                    img
                } else {
                    image::imageops::resize(&img, w as u32, h as u32, image::imageops::FilterType::Triangle)
                };
                let t = rgb_to_image(&img);
                self.env = self.model.environment(&t).map_err(|e| e.to_string())?;
                self.image = t;
                self.label = None;
            }
            Command::Shift { dx, dy } => {
                let limit = (h.min(w) / 4) as i64;
                if dx.abs() > limit || dy.abs() > limit {
                    return Err(format!("shift ({dx}, {dy}) exceeds a quarter of the frame ({limit})"));
                }
                let (dx, dy) = (dx as isize, dy as isize);
                let img = shift_image(&self.image, dx, dy);
                self.env = self.model.environment(&img).map_err(|e| e.to_string())?;
                self.image = img;
                self.label = self.label.as_ref().map(|l| shift_label(l, dx, dy));
            }
            Command::GrayRegion { x, y, w: rw, h: rh } => {
                let r = Rect { x, y, w: rw, h: rh };
                r.check(h, w).map_err(|e| e.to_string())?;
                let mut img = self.image.clone();
                for yy in y..y + rh {
                    for xx in x..x + rw {
                        let o = (yy * w + xx) * 3;
                        img.data_mut()[o..o + 3].fill(0.0);
                    }
                }
                self.env = self.model.environment(&img).map_err(|e| e.to_string())?;
                self.image = img;
            }
            Command::ResetStateRegion { x, y, w: rw, h: rh } => {
                let dims = self.state.shape().dims().to_vec();
                let (sh, sw, d) = (dims[1], dims[2], dims[3]);
                let r = Rect { x, y, w: rw, h: rh };
                r.check(sh, sw).map_err(|e| e.to_string())?;
                self.resets += 1;
                let mut rng = RngStream::for_purpose(self.seed, Purpose::State).path(&[1, self.resets]);
                let data = self.state.data_mut();
                for yy in y..y + rh {
                    for xx in x..x + rw {
                        let o = (yy * sw + xx) * d;
                        for v in &mut data[o..o + d] {
                            *v = rng.normal() as f32;
                        }
                    }
                }
            }
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::Step { n } => return Ok(Effect::Steps(n)),
            Command::SetRate { sps } => {
                if !(sps.is_finite() && sps > 0.0) {
                    return Err(format!("rate {sps} must be positive and finite"));
                }
                self.sps = sps;
            }
        }
        Ok(Effect::None)
    }

    /// One CA update with draws keyed by the step index.
    pub fn advance(&mut self) -> cellseg_core::Result<()> {
        let dims = self.state.shape().dims().to_vec();
        let mut rng = [RngStream::for_purpose(self.seed, Purpose::UpdateMask).path(&[self.step + 1])];
        let draws = StepDraws::draw(&self.model.cfg, dims[1], dims[2], &mut rng);
        let out = self.model.step(&self.state, &self.env, &draws, self.step as usize + 1)?;
        self.state = out.state;
        self.mean_gate = out.mean_gate.map(|g| g[0]);
        self.step += 1;
        Ok(())
    }

    /// Frame payload for the current step.
    pub fn frame(&self) -> cellseg_core::Result<Value> {
        let (h, w) = self.extent();
        let classes = argmax_classes(&self.model.logits(&self.state)?);
        let iou = match &self.label {
            Some(l) => {
                let r = iou(&classes, l)?;
                json!({ "background": r.iou[0], "object": r.iou[1], "boundary": r.iou[2] })
            }
            None => Value::Null,
        };
        Ok(json!({
            "step": self.step,
            "prediction": b64_png(&prediction_rgb(&classes, h, w)),
            "state_rgb": b64_png(&unit_to_rgb(&state_rgb(&self.state)?, 0)?),
            "input": b64_png(&image_to_rgb(&self.image, 0)?),
            "mean_gate": self.mean_gate,
            "iou": iou,
        }))
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Drives one session over an accepted connection until the peer closes.
pub fn run_connection(mut ws: WebSocket<TcpStream>, mut session: Session) -> anyhow::Result<()> {
    let mut frame_seq = 0u64;
    let mut pending = 0usize;
    let mut next_due = Instant::now();
    loop {
        let wait = if pending > 0 || session.paused {
            Duration::from_millis(if pending > 0 { 1 } else { 50 })
        } else {
            next_due.saturating_duration_since(Instant::now()).clamp(Duration::from_millis(1), Duration::from_millis(50))
        };
        ws.get_mut().set_read_timeout(Some(wait))?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                let (seq, cmd) = parse_command(&text);
                let reply = match cmd.and_then(|c| session.apply(&c).map(|eff| (c.name(), eff))) {
                    Ok((name, eff)) => {
                        if let Effect::Steps(n) = eff {
                            pending += n;
                        }
                        if name == "resume" {
                            next_due = Instant::now();
                        }
                        ProbeMessage::ack(seq, name)
                    }
                    Err(reason) => ProbeMessage::error(seq, reason),
                };
                ws.send(Message::text(reply.to_text()))?;
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let due = !session.paused && Instant::now() >= next_due;
        if pending == 0 && !due {
            continue;
        }
        if pending > 0 {
            pending -= 1;
        } else {
            next_due = (next_due + Duration::from_secs_f64(1.0 / session.sps)).max(Instant::now() - Duration::from_secs(1));
        }
        if let Err(e) = session.advance() {
            session.paused = true;
            pending = 0;
            ws.send(Message::text(ProbeMessage::error(None, format!("{e}; paused")).to_text()))?;
            continue;
        }
        let frame = ProbeMessage { kind: "frame".into(), seq: Some(frame_seq), payload: session.frame()?, reason: None };
        frame_seq += 1;
        ws.send(Message::text(frame.to_text()))?;
    }
}

/// Accepts connections forever, one thread and one fresh colony per connection.
pub fn serve(listener: TcpListener, model: Arc<Automaton<f32>>, sample: Sample, seed: u64, start_paused: bool) -> anyhow::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let (model, sample) = (model.clone(), sample.clone());
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            let result = (|| {
                let ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("handshake: {e}"))?;
                let mut session = Session::new(model, &sample, seed)?;
                session.paused = start_paused;
                run_connection(ws, session)
            })();
            match result {
                Ok(()) => log::info!("probe connection {peer:?} closed"),
                Err(e) => log::warn!("probe connection {peer:?} failed: {e:#}"),
            }
        });
    }
    Ok(())
}
