//! C interface: load trained checkpoints into an opaque labeler handle and
//! label MetaImage volumes, receiving the assignment as a JSON string.
//!
//! Every function returns an [`SpgnnStatus`]; on failure the message is
//! available from [`spgnn_last_error`] on the same thread. Strings handed
//! out by the library must be released with [`spgnn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use airway_spgnn::cli::AssignmentJson;
use airway_spgnn::graphcore::TreeGraph;
use airway_spgnn::pipeline::Labeler;
use airway_spgnn::train::Checkpoint;
use airway_spgnn::volume::{build_branch_graph, read_label_map};
use airway_spgnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpgnnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Internal = 6,
}

/// Trained CNN with an optional graph network.
pub struct SpgnnLabeler {
    inner: Labeler,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SpgnnStatus {
    match e {
        Error::Io { .. } => SpgnnStatus::Io,
        Error::Format { .. } | Error::Json(_) => SpgnnStatus::Format,
        Error::Shape(_) => SpgnnStatus::Shape,
        _ => SpgnnStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SpgnnStatus, String)>) -> SpgnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SpgnnStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_owned());
            SpgnnStatus::Internal
        }
    }
}

fn lib(e: Error) -> (SpgnnStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, (SpgnnStatus, String)> {
    if p.is_null() {
        return Err((SpgnnStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (SpgnnStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spgnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn spgnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a CNN checkpoint and, when `gnn_path` is non-null, a graph-network
/// checkpoint. On success `*out` owns a handle for [`spgnn_labeler_free`].
///
/// # Safety
/// Paths must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgnn_labeler_load(
    cnn_path: *const c_char,
    gnn_path: *const c_char,
    out: *mut *mut SpgnnLabeler,
) -> SpgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err((SpgnnStatus::NullArgument, "out is null".to_owned()));
        }
        *out = ptr::null_mut();
        let cnn = Checkpoint::read(&path_arg(cnn_path, "cnn_path")?).and_then(Checkpoint::into_cnn).map_err(lib)?;
        let gnn = if gnn_path.is_null() {
            None
        } else {
            let g = Checkpoint::read(&path_arg(gnn_path, "gnn_path")?).and_then(Checkpoint::into_gnn).map_err(lib)?;
            if g.config.input_dim != cnn.config.feature_dim {
                return Err((SpgnnStatus::Shape, "graph network and CNN feature widths differ".to_owned()));
            }
            Some(g)
        };
        *out = Box::into_raw(Box::new(SpgnnLabeler { inner: Labeler { cnn, gnn } }));
        Ok(())
    })
}

/// # Safety
/// `h` must be null or a handle from [`spgnn_labeler_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spgnn_labeler_free(h: *mut SpgnnLabeler) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Labels the tree in a MetaImage label volume. The branch graph is read
/// from `graph_path` when non-null, otherwise built from the volume. On
/// success `*out_json` receives the assignment document.
///
/// # Safety
/// `h` must be a live handle; paths null or NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn spgnn_label_volume(
    h: *const SpgnnLabeler,
    volume_path: *const c_char,
    graph_path: *const c_char,
    out_json: *mut *mut c_char,
) -> SpgnnStatus {
    guard(|| {
        if h.is_null() || out_json.is_null() {
            return Err((SpgnnStatus::NullArgument, "handle or out_json is null".to_owned()));
        }
        *out_json = ptr::null_mut();
        let labeler = &(*h).inner;
        let volume = read_label_map(&path_arg(volume_path, "volume_path")?).map_err(lib)?;
        let graph = if graph_path.is_null() {
            build_branch_graph(&volume).map_err(lib)?
        } else {
            TreeGraph::read_json(&path_arg(graph_path, "graph_path")?).map_err(lib)?
        };
        let pred = labeler.label(&volume, &graph).map_err(lib)?;
        let json = serde_json::to_string(&AssignmentJson::new(&graph, &pred.assignment)).map_err(|e| lib(e.into()))?;
        *out_json = CString::new(json).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn spgnn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
