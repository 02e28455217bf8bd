use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::ServerMessage;
use crate::session::{Session, SessionConfig};

pub const DEFAULT_PORT: u16 = 8787;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
}

/// A running server; dropping the handle leaves it running until
/// [`ServerHandle::shutdown`] or process exit.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: oneshot::Sender<()>,
    join: JoinHandle<()>,
}

impl ServerHandle {
    pub async fn shutdown(self) {
        let _ = self.stop.send(());
        let _ = self.join.await;
    }

    /// Waits until the accept loop ends.
    pub async fn wait(self) {
        let _ = self.join.await;
    }
}

/// Binds and starts accepting clients, one active session at a time.
pub async fn serve(addr: impl ToSocketAddrs, cfg: SessionConfig) -> Result<ServerHandle, GatewayError> {
    let listener = TcpListener::bind(addr).await.map_err(GatewayError::Bind)?;
    let addr = listener.local_addr().map_err(GatewayError::Bind)?;
    let (stop, mut stopped) = oneshot::channel();
    let busy = Arc::new(AtomicBool::new(false));
    let counter = Arc::new(AtomicU64::new(0));
    let join = tokio::spawn(async move {
        loop {
            tokio::select! {
                _ = &mut stopped => break,
                accepted = listener.accept() => match accepted {
                    Ok((stream, peer)) => {
                        let (cfg, busy, counter) = (cfg.clone(), busy.clone(), counter.clone());
                        tokio::spawn(async move {
                            if let Err(e) = connection(stream, cfg, busy, counter).await {
                                log::warn!("client {peer}: {e}");
                            }
                        });
                    }
                    Err(e) => log::warn!("accept failed: {e}"),
                },
            }
        }
    });
    log::info!("gateway listening on ws://{addr}");
    Ok(ServerHandle { addr, stop, join })
}

async fn connection(stream: TcpStream, cfg: SessionConfig, busy: Arc<AtomicBool>, counter: Arc<AtomicU64>) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let mut ws = tokio_tungstenite::accept_async(stream).await?;
    if busy.swap(true, Ordering::SeqCst) {
        let msg = ServerMessage::Error { seq: 0, reply_to: None, message: "another client is already connected".into() };
        ws.send(Message::text(msg.to_text())).await?;
        ws.close(None).await?;
        return Ok(());
    }
    let id = format!("session-{}", counter.fetch_add(1, Ordering::SeqCst) + 1);
    let (mut sink, mut source) = ws.split();
    let (inbox_tx, inbox_rx) = mpsc::unbounded_channel::<String>();
    let (outbox_tx, mut outbox_rx) = mpsc::unbounded_channel::<ServerMessage>();
    let ticker = tokio::spawn(tick_loop(Session::new(cfg, &id), inbox_rx, outbox_tx));
    let writer = tokio::spawn(async move {
        while let Some(m) = outbox_rx.recv().await {
            if sink.send(Message::text(m.to_text())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });
    while let Some(frame) = source.next().await {
        match frame {
            Ok(Message::Text(t)) => {
                if inbox_tx.send(t.to_string()).is_err() {
                    break;
                }
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    drop(inbox_tx);
    let _ = ticker.await;
    let _ = writer.await;
    busy.store(false, Ordering::SeqCst);
    Ok(())
}

/// Sole owner of the session and its world.
async fn tick_loop(mut session: Session, mut inbox: mpsc::UnboundedReceiver<String>, outbox: mpsc::UnboundedSender<ServerMessage>) {
    let mut timer = tokio::time::interval(Duration::from_millis(50));
    timer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let realtime = !session.lockstep();
    loop {
        let out = tokio::select! {
            text = inbox.recv() => match text {
                Some(t) => session.handle(&t),
                None => break,
            },
            _ = timer.tick(), if realtime => session.tick(),
        };
        for m in out {
            if outbox.send(m).is_err() {
                return;
            }
        }
    }
}
