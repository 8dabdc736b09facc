//! Minimal HTTP mock for client tests.
#![allow(dead_code)]

use std::sync::{Arc, Mutex};
use std::thread;

pub struct Seen {
    pub method: String,
    pub url: String,
    pub auth: Option<String>,
    pub body: String,
}

pub struct Mock {
    pub base: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

/// Serves every request with `handler(method, url, body) -> (status, body)`.
pub fn serve<F>(handler: F) -> Mock
where
    F: Fn(&str, &str, &str) -> (u16, String) + Send + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind mock server");
    let base = format!("http://{}", server.server_addr().to_ip().expect("ip listener"));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            let method = req.method().to_string();
            let url = req.url().to_string();
            let (status, reply) = handler(&method, &url, &body);
            log.lock().unwrap().push(Seen { method, url, auth, body });
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(
                tiny_http::Response::from_string(reply)
                    .with_status_code(status)
                    .with_header(header),
            );
        }
    });
    Mock { base, seen }
}

/// An address nothing listens on.
pub fn dead_base() -> String {
    let server = tiny_http::Server::http("127.0.0.1:0").expect("bind");
    let addr = server.server_addr().to_ip().expect("ip listener");
    drop(server);
    format!("http://{addr}")
}
