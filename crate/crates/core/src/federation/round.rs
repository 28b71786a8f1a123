use std::collections::HashMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoders::{ClientEncoder, EmbeddingBundle, EmbeddingNodes, Role};
use crate::error::{Error, Result};
use crate::fusion::{check_aligned, ServerModel};
use crate::tensor::Tensor;

use super::message::{deserialize, serialize, MessageKind, ProtocolMessage, WirePrecision};
use super::protocol::ProtocolState;

/// Rows of one party's local table, addressed by sample id.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    ids: Vec<u32>,
    rows: Tensor,
    index: HashMap<u32, usize>,
}

impl FeatureStore {
    pub fn new(ids: Vec<u32>, rows: Tensor) -> Result<Self> {
        if rows.shape().first() != Some(&ids.len()) {
            return Err(Error::Alignment(format!(
                "{} ids for a table of shape {:?}",
                ids.len(),
                rows.shape()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Alignment(format!("duplicate sample id {id}")));
            }
        }
        Ok(FeatureStore { ids, rows, index })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    /// Rows for `ids`, in that order.
    pub fn gather(&self, ids: &[u32]) -> Result<Tensor> {
        let rows = ids
            .iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Alignment(format!("unknown sample id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.rows.select_rows(&rows))
    }
}

pub struct ClientParty {
    pub encoder: Box<dyn ClientEncoder>,
    pub store: FeatureStore,
}

impl ClientParty {
    pub fn new(encoder: Box<dyn ClientEncoder>, store: FeatureStore) -> Self {
        ClientParty { encoder, store }
    }

    pub fn role(&self) -> Role {
        self.encoder.role()
    }

    /// One round from the client's side: answer the batch request with an
    /// upload, then apply the downloaded gradient.
    fn serve(&mut self, inbox: &Receiver<Vec<u8>>, outbox: &Sender<Event>, lr: f64, wire: WirePrecision) -> Result<()> {
        let role = self.role();
        let request = deserialize(&recv(inbox, role)?, wire)?;
        let (round, ids) = match request.kind {
            MessageKind::BatchRequest { batch_ids } if request.sender == Role::Server => (request.round, batch_ids),
            _ => {
                return Err(Error::Protocol(format!(
                    "{} expected a batch request, got {}",
                    role.name(),
                    request.kind.name()
                )))
            }
        };
        let x = self.store.gather(&ids)?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let out = self.encoder.forward(&mut g, xn)?;
        let upload = ProtocolMessage {
            round,
            sender: role,
            kind: MessageKind::EmbeddingUpload(EmbeddingBundle {
                z_inv: g.value(out.nodes.inv).clone(),
                z_spec: g.value(out.nodes.spec).clone(),
                source: role,
                batch_ids: ids.clone(),
            }),
        };
        outbox
            .send(Event::Message(serialize(&upload, wire)))
            .map_err(|_| Error::Protocol("server hung up".into()))?;

        let reply = deserialize(&recv(inbox, role)?, wire)?;
        let (grad_inv, grad_spec) = match reply.kind {
            MessageKind::GradientDownload { recipient, grad_inv, grad_spec, batch_ids }
                if recipient == role && reply.round == round =>
            {
                if batch_ids != ids {
                    return Err(Error::Alignment(format!("{} received gradients for other ids", role.name())));
                }
                (grad_inv, grad_spec)
            }
            other => {
                return Err(Error::Protocol(format!(
                    "{} expected its gradient download, got {}",
                    role.name(),
                    other.name()
                )))
            }
        };
        for (node, grad) in [(out.nodes.inv, &grad_inv), (out.nodes.spec, &grad_spec)] {
            if g.shape(node) != grad.shape() {
                return Err(Error::dim(
                    "gradient_download",
                    format!("gradient {:?} for embedding {:?}", grad.shape(), g.shape(node)),
                ));
            }
        }
        let grads = g.backward_with(&[(out.nodes.inv, grad_inv), (out.nodes.spec, grad_spec)])?;
        let per_layer: Vec<Vec<Tensor>> = out.bound.iter().map(|b| b.grads(&grads)).collect();
        self.encoder.apply_sgd(&per_layer, lr)
    }
}

pub struct ServerParty {
    pub model: Box<dyn ServerModel>,
    /// One-hot labels `[N, K]`.
    pub labels: FeatureStore,
}

impl ServerParty {
    pub fn new(model: Box<dyn ServerModel>, labels: FeatureStore) -> Self {
        ServerParty { model, labels }
    }
}

/// Per-round communication record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u32,
    pub batch_size: usize,
    /// Tensor payload bytes sent client → server.
    pub upstream_bytes: usize,
    /// Tensor payload bytes sent server → client.
    pub downstream_bytes: usize,
    /// Full encoded message sizes, framing included.
    pub upstream_wire_bytes: usize,
    pub downstream_wire_bytes: usize,
}

impl RoundLog {
    pub fn per_sample_upstream_bytes(&self) -> f64 {
        self.upstream_bytes as f64 / self.batch_size as f64
    }
}

#[derive(Debug)]
pub struct RoundOutcome {
    pub loss: f64,
    pub consistency: Option<f64>,
    pub log: RoundLog,
    /// Every message of the round as the receiver decoded it, in protocol
    /// order with the image client's upload listed first.
    pub messages: Vec<ProtocolMessage>,
}

enum Event {
    Message(Vec<u8>),
    Failed(Role, Error),
}

fn recv(inbox: &Receiver<Vec<u8>>, role: Role) -> Result<Vec<u8>> {
    inbox
        .recv()
        .map_err(|_| Error::Protocol(format!("{} lost its connection", role.name())))
}

/// Runs one training round with each party on its own thread.
///
/// Parties only exchange serialized messages over channels; the server
/// checks every message against `state`. Parameters of all three parties
/// are updated with SGD at rate `lr`.
pub fn run_round(
    server: &mut ServerParty,
    image: &mut ClientParty,
    tabular: &mut ClientParty,
    batch_ids: &[u32],
    state: &mut ProtocolState,
    lr: f64,
    wire: WirePrecision,
) -> Result<RoundOutcome> {
    if image.role() != Role::ImageClient || tabular.role() != Role::TabularClient {
        return Err(Error::Config("clients must be one image and one tabular encoder".into()));
    }
    if batch_ids.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let labels = server.labels.gather(batch_ids)?;
    let round = state.round();

    thread::scope(|scope| {
        let (to_server, server_inbox) = channel::<Event>();
        let mut client_tx = HashMap::new();
        let mut handles = Vec::new();
        for client in [image, tabular] {
            let (tx, rx) = channel::<Vec<u8>>();
            client_tx.insert(client.role(), tx);
            let outbox = to_server.clone();
            handles.push(scope.spawn(move || {
                let role = client.role();
                // A panicking encoder must still wake the server.
                let served = panic::catch_unwind(AssertUnwindSafe(|| client.serve(&rx, &outbox, lr, wire)))
                    .unwrap_or_else(|p| {
                        let msg = p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_default();
                        Err(Error::Protocol(format!("{} panicked: {msg}", role.name())))
                    });
                if let Err(e) = served {
                    let _ = outbox.send(Event::Failed(role, e));
                }
            }));
        }
        drop(to_server);

        let result = serve_server(server, &client_tx, &server_inbox, &labels, batch_ids, round, state, lr, wire);
        drop(client_tx);
        let failure = server_inbox.iter().find_map(|ev| match ev {
            Event::Failed(role, e) => Some((role, e)),
            Event::Message(_) => None,
        });
        for h in handles {
            h.join().map_err(|_| Error::Protocol("client thread panicked".into()))?;
        }
        // A server-side error comes first: once it happens the clients only
        // report the dropped connection.
        match (result, failure) {
            (Err(e), _) => Err(e),
            (Ok(_), Some((_, e))) => Err(e),
            (Ok(outcome), None) => Ok(outcome),
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn serve_server(
    server: &mut ServerParty,
    clients: &HashMap<Role, Sender<Vec<u8>>>,
    inbox: &Receiver<Event>,
    labels: &Tensor,
    batch_ids: &[u32],
    round: u32,
    state: &mut ProtocolState,
    lr: f64,
    wire: WirePrecision,
) -> Result<RoundOutcome> {
    let mut messages = Vec::with_capacity(5);
    let mut log = RoundLog {
        round,
        batch_size: batch_ids.len(),
        upstream_bytes: 0,
        downstream_bytes: 0,
        upstream_wire_bytes: 0,
        downstream_wire_bytes: 0,
    };
    let send = |to: Role, bytes: Vec<u8>| {
        clients[&to]
            .send(bytes)
            .map_err(|_| Error::Protocol(format!("{} hung up", to.name())))
    };

    let request = ProtocolMessage {
        round,
        sender: Role::Server,
        kind: MessageKind::BatchRequest { batch_ids: batch_ids.to_vec() },
    };
    state.accept(&request)?;
    let bytes = serialize(&request, wire);
    send(Role::ImageClient, bytes.clone())?;
    send(Role::TabularClient, bytes)?;
    messages.push(request);

    let mut bundles: HashMap<Role, EmbeddingBundle> = HashMap::new();
    while bundles.len() < 2 {
        let bytes = match inbox.recv() {
            Ok(Event::Message(bytes)) => bytes,
            Ok(Event::Failed(_, e)) => return Err(e),
            Err(_) => return Err(Error::Protocol("clients hung up before uploading".into())),
        };
        let m = deserialize(&bytes, wire)?;
        state.accept(&m)?;
        log.upstream_bytes += m.payload_bytes(wire);
        log.upstream_wire_bytes += bytes.len();
        if let MessageKind::EmbeddingUpload(b) = &m.kind {
            bundles.insert(m.sender, b.clone());
        }
        messages.push(m);
    }
    // Arrival order depends on thread scheduling; the record does not.
    messages[1..].sort_by_key(|m| m.sender.code());
    let img = &bundles[&Role::ImageClient];
    let tab = &bundles[&Role::TabularClient];
    check_aligned(img, tab)?;

    let mut g = Graph::new();
    let img_nodes = EmbeddingNodes {
        inv: g.param(img.z_inv.clone()),
        spec: g.param(img.z_spec.clone()),
    };
    let tab_nodes = EmbeddingNodes {
        inv: g.param(tab.z_inv.clone()),
        spec: g.param(tab.z_spec.clone()),
    };
    let out = server.model.forward(&mut g, img_nodes, tab_nodes, labels)?;
    let mut grads = g.backward(out.loss)?;
    let server_grads: Vec<Vec<Tensor>> = out.bound.iter().map(|b| b.grads(&grads)).collect();

    for (to, nodes) in [(Role::ImageClient, img_nodes), (Role::TabularClient, tab_nodes)] {
        let take = |grads: &mut crate::autodiff::Gradients, id| {
            grads.take(id).ok_or_else(|| Error::Contract("embedding leaf without gradient".into()))
        };
        let download = ProtocolMessage {
            round,
            sender: Role::Server,
            kind: MessageKind::GradientDownload {
                recipient: to,
                grad_inv: take(&mut grads, nodes.inv)?,
                grad_spec: take(&mut grads, nodes.spec)?,
                batch_ids: batch_ids.to_vec(),
            },
        };
        state.accept(&download)?;
        let bytes = serialize(&download, wire);
        log.downstream_bytes += download.payload_bytes(wire);
        log.downstream_wire_bytes += bytes.len();
        send(to, bytes)?;
        messages.push(download.rounded(wire));
    }
    server.model.apply_sgd(&server_grads, lr)?;

    Ok(RoundOutcome {
        loss: g.value(out.loss).item(),
        consistency: out.consistency.map(|c| g.value(c).item()),
        log,
        messages,
    })
}

/// A server and two clients with the protocol state across rounds.
pub struct Federation {
    pub server: ServerParty,
    pub image: ClientParty,
    pub tabular: ClientParty,
    pub lr: f64,
    pub wire: WirePrecision,
    pub state: ProtocolState,
}

impl Federation {
    pub fn new(server: ServerParty, image: ClientParty, tabular: ClientParty, lr: f64, wire: WirePrecision) -> Self {
        Federation {
            server,
            image,
            tabular,
            lr,
            wire,
            state: ProtocolState::new(0),
        }
    }

    pub fn run_round(&mut self, batch_ids: &[u32]) -> Result<RoundOutcome> {
        run_round(
            &mut self.server,
            &mut self.image,
            &mut self.tabular,
            batch_ids,
            &mut self.state,
            self.lr,
            self.wire,
        )
    }

    /// Class probabilities `[b, K]` for `ids`, with embeddings passed through
    /// the wire rounding as in training. No parameters change.
    pub fn predict(&self, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let (img, tab) = self.embed(&mut g, ids)?;
        let p = self.server.model.predict(&mut g, img, tab)?;
        Ok(g.value(p).clone())
    }

    /// Training objective on `ids` without updating anything.
    pub fn objective(&self, ids: &[u32]) -> Result<f64> {
        let labels = self.server.labels.gather(ids)?;
        let mut g = Graph::new();
        let (img, tab) = self.embed(&mut g, ids)?;
        let out = self.server.model.forward(&mut g, img, tab, &labels)?;
        Ok(g.value(out.loss).item())
    }

    fn embed(&self, g: &mut Graph, ids: &[u32]) -> Result<(EmbeddingNodes, EmbeddingNodes)> {
        let img = self.image.encoder.encode(&self.image.store.gather(ids)?, ids)?;
        let tab = self.tabular.encoder.encode(&self.tabular.store.gather(ids)?, ids)?;
        let mut leaf = |t: &Tensor| -> Result<_> {
            let rounded = t.data().iter().map(|&v| self.wire.round_trip(v)).collect();
            Ok(g.constant(Tensor::new(t.shape().to_vec(), rounded)?))
        };
        Ok((
            EmbeddingNodes {
                inv: leaf(&img.z_inv)?,
                spec: leaf(&img.z_spec)?,
            },
            EmbeddingNodes {
                inv: leaf(&tab.z_inv)?,
                spec: leaf(&tab.z_spec)?,
            },
        ))
    }
}
