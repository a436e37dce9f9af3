//! C ABI over the simulator.
//!
//! Every function returns an [`RvStatus`]. On failure the message is kept
//! per thread and read with [`rv_last_error_message`]. Strings handed out
//! by this library are freed with [`rv_string_free`]; handles with their
//! own `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use p2pvpn::experiments::crawl::crawl_all;
use p2pvpn::experiments::dataset::synthetic_latency;
use p2pvpn::experiments::relay_bench::{relay_benchmark, to_csv, ExperimentConfig};
use p2pvpn::experiments::world::stable_overlay;
use p2pvpn::groups::{GroupError, GroupServer};
use p2pvpn::overlay::{NodeId, Overlay};
use p2pvpn::vpn::tunnel::{tunnel_demo, TunnelConfig};
use p2pvpn::vpn::Approach;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    NotFound = 4,
    Rejected = 5,
    Panic = 6,
}

/// A stabilized overlay plus its node ids in join order.
pub struct RvOverlay {
    ov: Overlay,
    ids: Vec<NodeId>,
}

pub struct RvGroupServer {
    inner: GroupServer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = CString::new(msg.into().replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

struct Fail(RvStatus, String);

impl Fail {
    fn new(status: RvStatus, msg: impl Into<String>) -> Self {
        Fail(status, msg.into())
    }
}

impl From<GroupError> for Fail {
    fn from(e: GroupError) -> Self {
        let status = match e {
            GroupError::UnknownGroup(_) | GroupError::UnknownUser(_) | GroupError::NoPendingRequest(_) => {
                RvStatus::NotFound
            }
            _ => RvStatus::Rejected,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RvStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            RvStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::new(RvStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::new(RvStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::new(RvStatus::NullPointer, format!("{what} is null")))
}

fn give_string(s: String, out: &mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail::new(RvStatus::Rejected, "output contains a nul byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn rv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ----- overlay ----------------------------------------------------------

/// Build and stabilize an `n`-node overlay on synthetic latencies.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_new(n: usize, seed: u64, out: *mut *mut RvOverlay) -> RvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if n == 0 {
            return Err(Fail::new(RvStatus::InvalidArgument, "n must be at least 1"));
        }
        let (ov, ids) = stable_overlay(n, seed);
        *out = Box::into_raw(Box::new(RvOverlay { ov, ids }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`rv_overlay_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_free(h: *mut RvOverlay) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn overlay<'a>(h: *mut RvOverlay) -> Result<&'a mut RvOverlay, Fail> {
    h.as_mut().ok_or_else(|| Fail::new(RvStatus::NullPointer, "overlay handle is null"))
}

fn node_at(h: &RvOverlay, index: usize) -> Result<NodeId, Fail> {
    let id = *h.ids.get(index).ok_or_else(|| Fail::new(RvStatus::InvalidArgument, format!("no node {index}")))?;
    if !h.ov.is_live(id) {
        return Err(Fail::new(RvStatus::NotFound, format!("node {index} is gone")));
    }
    Ok(id)
}

/// Live nodes.
///
/// # Safety
/// `h` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_len(h: *mut RvOverlay, out: *mut usize) -> RvStatus {
    guard(|| {
        let h = overlay(h)?;
        *out_arg(out, "out")? = h.ov.len();
        Ok(())
    })
}

/// One maintenance round.
///
/// # Safety
/// `h` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_tick(h: *mut RvOverlay) -> RvStatus {
    guard(|| {
        overlay(h)?.ov.tick();
        Ok(())
    })
}

/// Crash node `index` (join order) without notice.
///
/// # Safety
/// `h` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_kill(h: *mut RvOverlay, index: usize) -> RvStatus {
    guard(|| {
        let h = overlay(h)?;
        let id = node_at(h, index)?;
        h.ov.kill(id).map_err(|e| Fail::new(RvStatus::NotFound, e.to_string()))
    })
}

/// Greedy overlay hops from node `src` to node `dst`.
///
/// # Safety
/// `h` and `hops` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_route_hops(h: *mut RvOverlay, src: usize, dst: usize, hops: *mut usize) -> RvStatus {
    guard(|| {
        let h = overlay(h)?;
        let hops = out_arg(hops, "hops")?;
        let (a, b) = (node_at(h, src)?, node_at(h, dst)?);
        let t = h.ov.route_to(a, b).map_err(|e| Fail::new(RvStatus::Rejected, e.to_string()))?;
        if t.delivered_at() != b {
            return Err(Fail::new(RvStatus::Rejected, "route ended short of the destination"));
        }
        *hops = t.hop_count();
        Ok(())
    })
}

/// Crawl the ring from its lowest id.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_overlay_crawl(h: *mut RvOverlay, visited: *mut usize, inconsistent: *mut usize) -> RvStatus {
    guard(|| {
        let h = overlay(h)?;
        let (visited, inconsistent) = (out_arg(visited, "visited")?, out_arg(inconsistent, "inconsistent")?);
        let r = crawl_all(&h.ov);
        *visited = r.visited;
        *inconsistent = r.inconsistent.len();
        Ok(())
    })
}

// ----- experiments ------------------------------------------------------

/// Relay benchmark on a synthetic matrix of `hosts` rows; writes CSV.
///
/// # Safety
/// `sizes` must point to `n_sizes` values; `csv_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_relay_bench_csv(
    hosts: usize,
    sizes: *const usize,
    n_sizes: usize,
    trials: usize,
    seed: u64,
    csv_out: *mut *mut c_char,
) -> RvStatus {
    guard(|| {
        let out = out_arg(csv_out, "csv_out")?;
        if sizes.is_null() || n_sizes == 0 {
            return Err(Fail::new(RvStatus::NullPointer, "sizes is empty"));
        }
        let cfg = ExperimentConfig {
            sizes: std::slice::from_raw_parts(sizes, n_sizes).to_vec(),
            trials_per_size: trials,
            seed,
            ..ExperimentConfig::default()
        };
        let rows = relay_benchmark(&synthetic_latency(hosts, seed), &cfg)
            .map_err(|e| Fail::new(RvStatus::InvalidArgument, e.to_string()))?;
        give_string(to_csv(&rows), out)
    })
}

/// Full-tunnel sniffer capture. `approach` is 1 or 2.
///
/// # Safety
/// `leak` and `csv_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_tunnel_demo_csv(
    approach: u8,
    spoof_attack: bool,
    seed: u64,
    leak: *mut bool,
    csv_out: *mut *mut c_char,
) -> RvStatus {
    guard(|| {
        let (leak, out) = (out_arg(leak, "leak")?, out_arg(csv_out, "csv_out")?);
        let approach = match approach {
            1 => Approach::One,
            2 => Approach::Two,
            other => return Err(Fail::new(RvStatus::InvalidArgument, format!("approach {other}"))),
        };
        let r = tunnel_demo(&TunnelConfig::new(approach, spoof_attack, seed))
            .map_err(|e| Fail::new(RvStatus::Rejected, e.to_string()))?;
        *leak = r.leak();
        give_string(r.csv(), out)
    })
}

// ----- group server -----------------------------------------------------

/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_group_server_new(seed: u64, out: *mut *mut RvGroupServer) -> RvStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(RvGroupServer { inner: GroupServer::new(seed) }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`rv_group_server_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn rv_group_server_free(h: *mut RvGroupServer) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn server<'a>(h: *mut RvGroupServer) -> Result<&'a mut GroupServer, Fail> {
    h.as_mut().map(|s| &mut s.inner).ok_or_else(|| Fail::new(RvStatus::NullPointer, "server handle is null"))
}

/// # Safety
/// All pointers must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rv_group_create(
    h: *mut RvGroupServer,
    admin: *const c_char,
    name: *const c_char,
    subnet: *const c_char,
) -> RvStatus {
    guard(|| {
        let s = server(h)?;
        let (admin, name, subnet) = (str_arg(admin, "admin")?, str_arg(name, "name")?, str_arg(subnet, "subnet")?);
        let subnet = subnet.parse().map_err(|_| Fail::new(RvStatus::InvalidArgument, format!("bad subnet {subnet:?}")))?;
        s.create_group(admin, name, subnet)?;
        Ok(())
    })
}

/// Run one line of the text protocol as `user` and return the reply.
///
/// # Safety
/// `user` and `line` must be valid strings; `reply` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rv_group_handle_line(
    h: *mut RvGroupServer,
    user: *const c_char,
    line: *const c_char,
    reply: *mut *mut c_char,
) -> RvStatus {
    guard(|| {
        let s = server(h)?;
        let (user, line, out) = (str_arg(user, "user")?, str_arg(line, "line")?, out_arg(reply, "reply")?);
        give_string(s.handle_line(user, line), out)
    })
}

/// Revoke `user` in `group`; `revoked_nodes` receives how many certified
/// nodes were cut off.
///
/// # Safety
/// String arguments must be valid; `revoked_nodes` may be null.
#[no_mangle]
pub unsafe extern "C" fn rv_group_revoke(
    h: *mut RvGroupServer,
    group: *const c_char,
    user: *const c_char,
    revoked_nodes: *mut usize,
) -> RvStatus {
    guard(|| {
        let s = server(h)?;
        let nodes = s.revoke(str_arg(group, "group")?, str_arg(user, "user")?)?;
        if let Some(out) = revoked_nodes.as_mut() {
            *out = nodes.len();
        }
        Ok(())
    })
}
