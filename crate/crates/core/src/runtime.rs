//! Per-party protocol state: session, PHE keys, comparison backend and
//! randomness. Blocks are methods on [`Runtime`].

use std::sync::Arc;

use rand::Rng;

use crate::compare::{ComparisonBackend, ComparisonKind, Comparator, IdealDealer};
use crate::counters::{Counters, OpCounters};
use crate::error::{Error, Result};
use crate::phe::{BackendKind, Party, PheContext, PheKeyMaterial};
use crate::ring::{Prng, ProtocolParams};
use crate::transport::{handshake, loopback_pair, Conn, Session};

pub struct Runtime {
    pub role: Party,
    pub params: ProtocolParams,
    pub sess: Session,
    pub phe: PheContext,
    pub keys: PheKeyMaterial,
    pub cmp: Comparator,
    pub rng: Prng,
}

impl Runtime {
    pub fn new(
        params: &ProtocolParams,
        sess: Session,
        phe_kind: BackendKind,
        cmp: Comparator,
        mut rng: Prng,
    ) -> Result<Self> {
        let phe = PheContext::with_counters(phe_kind, params, sess.counters().clone())?;
        let keys = phe.keygen(sess.role, &mut rng);
        Ok(Runtime {
            role: sess.role,
            params: params.clone(),
            sess,
            phe,
            keys,
            cmp,
            rng,
        })
    }

    pub fn p(&self) -> u64 {
        self.params.p
    }

    pub fn counters(&self) -> &Arc<Counters> {
        self.sess.counters()
    }

    pub fn snapshot(&self) -> OpCounters {
        self.counters().snapshot()
    }

    pub fn is_client(&self) -> bool {
        self.role == Party::Client
    }
}

/// Everything needed to stand up both parties of one session.
#[derive(Clone)]
pub struct PairConfig {
    pub params: ProtocolParams,
    pub phe: BackendKind,
    pub compare: ComparisonBackend,
    pub plan_digest: [u8; 32],
}

impl PairConfig {
    pub fn new(params: ProtocolParams, phe: BackendKind, compare: ComparisonBackend) -> Self {
        PairConfig {
            params,
            phe,
            compare,
            plan_digest: [0; 32],
        }
    }
}

/// Handshake over `conn` and build one party's runtime.
pub fn connect(
    conn: Box<dyn Conn>,
    role: Party,
    cfg: &PairConfig,
    dealer: Option<Arc<IdealDealer>>,
) -> Result<Runtime> {
    let label = match role {
        Party::Client => "party/client",
        Party::Server => "party/server",
    };
    let mut rng = cfg.params.rng(label);
    let counters = Arc::new(Counters::default());
    let sess = handshake(
        conn,
        role,
        cfg.params.digest(),
        cfg.plan_digest,
        counters,
        &mut rng,
    )?;
    let cmp = Comparator::new(cfg.compare, dealer)?;
    Runtime::new(&cfg.params, sess, cfg.phe, cmp, rng)
}

/// Run client and server closures on two threads joined by a loopback
/// transport. An ideal-dealer backend gets a fresh dealer shared by both.
pub fn run_pair<A, B, FC, FS>(cfg: &PairConfig, client: FC, server: FS) -> Result<(A, B)>
where
    A: Send,
    B: Send,
    FC: FnOnce(&mut Runtime) -> Result<A> + Send,
    FS: FnOnce(&mut Runtime) -> Result<B> + Send,
{
    let (cc, sc) = loopback_pair();
    let dealer = match cfg.compare.kind {
        ComparisonKind::Ideal => Some(IdealDealer::new(cfg.params.p, cfg.params.rng("dealer").gen())),
        ComparisonKind::Ot => None,
    };
    std::thread::scope(|s| {
        let d = dealer.clone();
        let hs = s.spawn(move || -> Result<B> {
            let r = connect(Box::new(sc), Party::Server, cfg, d.clone()).and_then(|mut rt| server(&mut rt));
            if let (Err(_), Some(d)) = (&r, &d) {
                d.poison();
            }
            r
        });
        let a = connect(Box::new(cc), Party::Client, cfg, dealer.clone()).and_then(|mut rt| client(&mut rt));
        if let (Err(_), Some(d)) = (&a, &dealer) {
            d.poison();
        }
        let b = hs
            .join()
            .map_err(|_| Error::Protocol("server thread panicked".into()))?;
        match (a, b) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            // The side that failed first explains the failure better than
            // the connection error its peer observes.
            (Err(e), Ok(_)) | (Ok(_), Err(e)) => Err(e),
            (Err(ea), Err(eb)) => Err(match ea {
                Error::Connection(_) => eb,
                _ => ea,
            }),
        }
    })
}
