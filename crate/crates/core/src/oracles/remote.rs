//! JSON-over-HTTP oracle clients.
//!
//! `POST {base}/nli    {"premise", "hypothesis"} -> {"label", "confidence"}`
//! `POST {base}/expand {"text", "relations", "max_attrs"} -> {"expansions": [{"relation", "attributes"}]}`

use serde::{Deserialize, Serialize};
use std::time::Duration;

use super::{Expander, Expansion, NliBackend, NliClass, NliLabel, Relation};
use crate::error::{Error, Result};

const ATTEMPTS: usize = 3;

struct Http {
    base: String,
    client: reqwest::blocking::Client,
}

impl Http {
    fn new(base: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Http { base: base.trim_end_matches('/').to_string(), client })
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, route: &str, body: &Req) -> Result<Resp> {
        let url = format!("{}/{route}", self.base);
        let mut last = None;
        for attempt in 0..ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 << attempt));
            }
            match self.try_post(&url, body) {
                Err(e) if e.is_retryable() => {
                    log::warn!("{url}: attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn try_post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(&self, url: &str, body: &Req) -> Result<Resp> {
        let resp = self.client.post(url).json(body).send().map_err(|e| Error::Backend(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Error::Backend(format!("{url} returned {status}")));
        }
        if !status.is_success() {
            return Err(Error::MalformedResponse(format!("{url} returned {status}")));
        }
        let bytes = resp.bytes().map_err(|e| Error::Backend(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::MalformedResponse(e.to_string()))
    }
}

#[derive(Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct NliResponse {
    label: NliClass,
    confidence: f64,
}

pub struct RemoteNli {
    http: Http,
}

impl RemoteNli {
    pub fn new(base_url: &str) -> Result<Self> {
        Ok(RemoteNli { http: Http::new(base_url, Duration::from_secs(30))? })
    }
}

impl NliBackend for RemoteNli {
    fn backend_id(&self) -> String {
        format!("remote-nli:{}", self.http.base)
    }

    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        let r: NliResponse = self.http.post("nli", &NliRequest { premise, hypothesis })?;
        if !r.confidence.is_finite() {
            return Err(Error::MalformedResponse("non-finite confidence".into()));
        }
        Ok(NliLabel { class: r.label, confidence: r.confidence })
    }
}

#[derive(Serialize)]
struct ExpandRequest<'a> {
    text: &'a str,
    relations: Vec<&'static str>,
    max_attrs: usize,
}

#[derive(Deserialize)]
struct RawExpansion {
    relation: String,
    attributes: Vec<String>,
}

#[derive(Deserialize)]
struct ExpandResponse {
    expansions: Vec<RawExpansion>,
}

pub struct RemoteExpander {
    http: Http,
}

impl RemoteExpander {
    pub fn new(base_url: &str) -> Result<Self> {
        Ok(RemoteExpander { http: Http::new(base_url, Duration::from_secs(60))? })
    }
}

impl Expander for RemoteExpander {
    fn backend_id(&self) -> String {
        format!("remote-expander:{}", self.http.base)
    }

    fn expand(&self, text: &str, relations: &[Relation], max_attrs: usize) -> Result<Vec<Expansion>> {
        let req = ExpandRequest { text, relations: relations.iter().map(|r| r.name()).collect(), max_attrs };
        let resp: ExpandResponse = self.http.post("expand", &req)?;
        resp.expansions
            .into_iter()
            .map(|e| {
                let relation = e
                    .relation
                    .parse::<Relation>()
                    .map_err(|_| Error::MalformedResponse(format!("unknown relation `{}`", e.relation)))?;
                Ok(Expansion { relation, attributes: e.attributes })
            })
            .collect()
    }
}
