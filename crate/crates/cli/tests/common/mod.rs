//! Shared by the integration tests: a loopback chat-completions endpoint.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Loopback stand-in for a chat-completions endpoint; answers by stage.
pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

pub fn scripted_answer(prompt: &str) -> &'static str {
    if prompt.contains("evaluation.csv") {
        "```csv\nRule,Importance,In explanation\nx,0,0\n```"
    } else if prompt.contains("temp_csv.csv") {
        "```csv\nage,workclass,education,marital_status,occupation,race,gender,hours_per_week,income\n\
         41,Self-Employed,Bachelors,Married,Professional,White,Male,30,1\n```"
    } else if prompt.contains("extract the most important observed rules") {
        "```\nRULE education in {Bachelors, Masters, Prof-school, Doctorate} :: Higher education leads to higher income.\n\
         RULE marital_status eq {Married} :: Being married goes with higher income.\n\
         RULE hours_per_week gt 40 :: Working more hours leads to higher income.\n\
         OBSERVATION :: Age matters little here.\n```"
    } else {
        "Study for a degree, and consider longer working hours."
    }
}

fn serve(stream: TcpStream, hits: &AtomicUsize) {
    let mut writer = stream.try_clone().expect("clone stream");
    let mut reader = BufReader::new(stream);
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut len = 0usize;
        loop {
            let mut h = String::new();
            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                return;
            }
            let h = h.trim_end();
            if h.is_empty() {
                break;
            }
            if let Some((name, value)) = h.split_once(':') {
                if name.eq_ignore_ascii_case("content-length") {
                    len = value.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0; len];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        hits.fetch_add(1, Ordering::SeqCst);
        let req: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
        let prompt = req["messages"]
            .as_array()
            .and_then(|m| m.last())
            .and_then(|m| m["content"].as_str())
            .unwrap_or_default();
        let resp = serde_json::json!({
            "id": "mock",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": scripted_answer(prompt)}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 1, "completion_tokens": 1, "total_tokens": 2},
        })
        .to_string();
        let head = format!(
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            resp.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(resp.as_bytes())).is_err() {
            return;
        }
    }
}

pub fn start_mock() -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
    let url = format!("http://{}", listener.local_addr().expect("local addr"));
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let counter = counter.clone();
            std::thread::spawn(move || serve(stream, &counter));
        }
    });
    MockServer { url, hits }
}
