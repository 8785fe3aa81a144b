//! Per-party operation counters. Increments are atomic so data-parallel
//! evaluation still produces exact totals.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

macro_rules! counters {
    ($($field:ident),* $(,)?) => {
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub $field: AtomicU64,)*
        }

        /// Point-in-time copy of [`Counters`].
        #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
        pub struct OpCounters {
            $(pub $field: u64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> OpCounters {
                OpCounters { $($field: self.$field.load(Ordering::SeqCst),)* }
            }
        }

        impl OpCounters {
            /// Counts accumulated since `earlier`.
            pub fn since(&self, earlier: &OpCounters) -> OpCounters {
                OpCounters { $($field: self.$field - earlier.$field,)* }
            }

            pub fn plus(&self, other: &OpCounters) -> OpCounters {
                OpCounters { $($field: self.$field + other.$field,)* }
            }
        }
    };
}

counters!(
    enc,
    dec,
    add,
    mul_plain,
    rot,
    ciphertexts_sent,
    bytes_sent,
    messages_sent,
    drelu_calls,
    drelu_elements,
    comp_calls,
    mux_calls,
    ot_messages,
);

impl Counters {
    pub fn bump(field: &AtomicU64, by: u64) {
        field.fetch_add(by, Ordering::SeqCst);
    }
}
