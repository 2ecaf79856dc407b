//! One thread per stage. The coordinator broadcasts a command and waits for
//! every stage's reply; packets travel directly from stage `i` to stage
//! `i + 1` over their own channel.

use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;

use crate::model::{Embeddings, ToyModel};
use crate::tree::{LevelSnapshot, TokenId};

use super::bank::{ComputeResult, StageBank};
use super::stage::{PruneDirective, PruneReport, StageAudit, StageMessage, StageState};
use super::{PipelineConfig, PipelineError};

enum Command {
    Prefill {
        prompt: Arc<Vec<TokenId>>,
        root: LevelSnapshot,
    },
    Compute,
    Prune(PruneDirective),
    Transmit(Option<StageMessage>),
    Audit,
}

enum Reply {
    Prefilled(usize),
    Computed {
        rows: usize,
        head: Option<(crate::tree::NodeId, TokenId)>,
    },
    Pruned(PruneReport),
    Sent(usize),
    Audited(StageAudit),
}

/// What travels between neighbouring stages.
enum Link {
    Prefill(Embeddings),
    Packet(Option<StageMessage>),
    /// The upstream stage failed; give up on this exchange.
    Abort,
}

struct Worker {
    stage: StageState,
    model: Arc<ToyModel>,
    from_prev: Option<Receiver<Link>>,
    to_next: Option<Sender<Link>>,
}

impl Worker {
    fn upstream(&self) -> Result<Link, PipelineError> {
        let rx = self
            .from_prev
            .as_ref()
            .expect("only called on later stages");
        match rx.recv() {
            Ok(Link::Abort) | Err(_) => Err(PipelineError::Worker(format!(
                "stage {}: upstream stage failed",
                self.stage.index()
            ))),
            Ok(link) => Ok(link),
        }
    }

    fn send(&self, link: Link) {
        if let Some(tx) = &self.to_next {
            // A closed channel means the downstream worker is gone; its own
            // failure is reported to the coordinator.
            let _ = tx.send(link);
        }
    }

    fn handle(&mut self, cmd: Command) -> Result<Reply, PipelineError> {
        match cmd {
            Command::Prefill { prompt, root } => match self.prefill(&prompt, &root) {
                Ok(out) => {
                    self.send(Link::Prefill(out));
                    Ok(Reply::Prefilled(prompt.len()))
                }
                Err(e) => {
                    self.send(Link::Abort);
                    Err(e)
                }
            },
            Command::Compute => {
                let rows = self.stage.compute(&self.model)?;
                let head = self.stage.head(&self.model)?;
                Ok(Reply::Computed { rows, head })
            }
            Command::Prune(d) => Ok(Reply::Pruned(self.stage.prune(&d)?)),
            Command::Transmit(inject) => {
                // Always send before receiving so a failure here cannot leave
                // the next stage waiting.
                let sent = match self.stage.take_outgoing() {
                    Ok(msg) => {
                        let n = msg.as_ref().map_or(0, StageMessage::len);
                        self.send(Link::Packet(msg));
                        Ok(n)
                    }
                    Err(e) => {
                        self.send(Link::Abort);
                        Err(e)
                    }
                };
                let incoming = if self.stage.is_first() {
                    inject
                } else {
                    match self.upstream()? {
                        Link::Packet(p) => p,
                        _ => return Err(self.out_of_order()),
                    }
                };
                let sent = sent?;
                self.stage.receive(incoming)?;
                Ok(Reply::Sent(sent))
            }
            Command::Audit => Ok(Reply::Audited(self.stage.audit())),
        }
    }

    fn prefill(
        &mut self,
        prompt: &[TokenId],
        root: &LevelSnapshot,
    ) -> Result<Embeddings, PipelineError> {
        let hidden = if self.stage.is_first() {
            None
        } else {
            match self.upstream()? {
                Link::Prefill(h) => Some(h),
                _ => return Err(self.out_of_order()),
            }
        };
        self.stage.prefill(&self.model, prompt, hidden, root)
    }

    fn out_of_order(&self) -> PipelineError {
        PipelineError::Worker(format!(
            "stage {}: unexpected message from upstream",
            self.stage.index()
        ))
    }
}

struct Handle {
    commands: Sender<Command>,
    replies: Receiver<Result<Reply, PipelineError>>,
    thread: Option<JoinHandle<()>>,
}

/// Stage workers on their own threads.
pub struct WorkerBank {
    handles: Vec<Handle>,
}

/// Outgoing and incoming channel of one stage thread.
type LinkEnds = (Option<Sender<Link>>, Option<Receiver<Link>>);

impl WorkerBank {
    pub fn new(model: Arc<ToyModel>, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let ranges = cfg.layer_ranges(model.config().layers)?;
        let m = ranges.len();
        let dim = model.dim();
        let mut links: Vec<LinkEnds> = (0..m).map(|_| (None, None)).collect();
        for i in 0..m - 1 {
            let (tx, rx) = channel();
            links[i].0 = Some(tx);
            links[i + 1].1 = Some(rx);
        }
        let mut handles = Vec::with_capacity(m);
        for (i, (range, (to_next, from_prev))) in ranges.into_iter().zip(links).enumerate() {
            let (cmd_tx, cmd_rx) = channel::<Command>();
            let (reply_tx, reply_rx) = channel();
            let mut worker = Worker {
                stage: StageState::new(i, m, range, dim),
                model: Arc::clone(&model),
                from_prev,
                to_next,
            };
            let thread = std::thread::Builder::new()
                .name(format!("stage-{i}"))
                .spawn(move || {
                    for cmd in cmd_rx {
                        if reply_tx.send(worker.handle(cmd)).is_err() {
                            break;
                        }
                    }
                })
                .map_err(|e| PipelineError::Worker(e.to_string()))?;
            handles.push(Handle {
                commands: cmd_tx,
                replies: reply_rx,
                thread: Some(thread),
            });
        }
        Ok(Self { handles })
    }

    /// Sends one command per stage, then gathers every reply in stage order.
    fn broadcast(
        &mut self,
        mut make: impl FnMut(usize) -> Command,
    ) -> Result<Vec<Reply>, PipelineError> {
        for (i, h) in self.handles.iter().enumerate() {
            h.commands
                .send(make(i))
                .map_err(|_| PipelineError::Worker(format!("stage {i} is not running")))?;
        }
        let mut replies = Vec::with_capacity(self.handles.len());
        let mut first_err = None;
        for (i, h) in self.handles.iter().enumerate() {
            match h.replies.recv() {
                Ok(Ok(r)) => replies.push(r),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(PipelineError::Worker(format!("stage {i} stopped")));
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(replies),
        }
    }
}

fn unexpected() -> PipelineError {
    PipelineError::Worker("reply does not match command".into())
}

impl StageBank for WorkerBank {
    fn stage_count(&self) -> usize {
        self.handles.len()
    }

    fn prefill(
        &mut self,
        prompt: &[TokenId],
        root: &LevelSnapshot,
    ) -> Result<Vec<usize>, PipelineError> {
        let prompt = Arc::new(prompt.to_vec());
        self.broadcast(|_| Command::Prefill {
            prompt: Arc::clone(&prompt),
            root: root.clone(),
        })?
        .into_iter()
        .map(|r| match r {
            Reply::Prefilled(n) => Ok(n),
            _ => Err(unexpected()),
        })
        .collect()
    }

    fn compute(&mut self) -> Result<ComputeResult, PipelineError> {
        let replies = self.broadcast(|_| Command::Compute)?;
        let mut rows = Vec::with_capacity(replies.len());
        let mut last_head = None;
        for r in replies {
            match r {
                Reply::Computed { rows: n, head } => {
                    rows.push(n);
                    last_head = head;
                }
                _ => return Err(unexpected()),
            }
        }
        Ok(ComputeResult {
            rows,
            head: last_head,
        })
    }

    fn prune(&mut self, directive: &PruneDirective) -> Result<Vec<PruneReport>, PipelineError> {
        self.broadcast(|_| Command::Prune(*directive))?
            .into_iter()
            .map(|r| match r {
                Reply::Pruned(p) => Ok(p),
                _ => Err(unexpected()),
            })
            .collect()
    }

    fn transmit(&mut self, inject: Option<StageMessage>) -> Result<Vec<usize>, PipelineError> {
        let mut inject = Some(inject);
        self.broadcast(|i| {
            Command::Transmit(if i == 0 {
                inject.take().flatten()
            } else {
                None
            })
        })?
        .into_iter()
        .map(|r| match r {
            Reply::Sent(n) => Ok(n),
            _ => Err(unexpected()),
        })
        .collect()
    }

    fn audit(&mut self) -> Result<Vec<StageAudit>, PipelineError> {
        self.broadcast(|_| Command::Audit)?
            .into_iter()
            .map(|r| match r {
                Reply::Audited(a) => Ok(a),
                _ => Err(unexpected()),
            })
            .collect()
    }
}

impl Drop for WorkerBank {
    fn drop(&mut self) {
        for h in &mut self.handles {
            // Closing the command channel ends the worker loop.
            let (dead, _) = channel();
            drop(std::mem::replace(&mut h.commands, dead));
        }
        for h in &mut self.handles {
            if let Some(t) = h.thread.take() {
                let _ = t.join();
            }
        }
    }
}
