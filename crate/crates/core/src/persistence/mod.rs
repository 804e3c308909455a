//! Append-only session transcripts, prompt history, resume/fork and file checkpoints.

mod checkpoint;
mod history;
mod load;
mod store;

pub use checkpoint::{file_checkpoint, rewind_files, Checkpointer, FileCheckpoint};
pub use history::{append_history, read_history_forward, read_history_reverse, HistoryEntry};
pub use load::{find_transcript, fork_session, load_session, load_transcript, read_events, replay, LoadedSession};
pub use store::{transcript_path, SessionStore};
