use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, ValueEnum};
use piimask::client::{EndpointClient, EndpointConfig, EndpointDetector, PromptTemplate, TemplateKind};
use piimask::detectors::DetectError;
use piimask::{Detector, Entity, MappingTable, RegexSuite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Regex,
    Endpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TemplateArg {
    Seq2seq,
    Causal,
}

/// Options shared by every subcommand that needs a detector.
#[derive(Debug, Clone, Args)]
pub struct BackendArgs {
    /// Masking backend.
    #[arg(long, value_enum, default_value = "regex", global = true)]
    pub backend: BackendKind,
    /// Regex patterns file (LABEL<TAB>PRIORITY<TAB>PATTERN per line).
    #[arg(long, global = true)]
    pub patterns: Option<PathBuf>,
    /// Label mapping file (RAW = CANONICAL per line).
    #[arg(long, global = true)]
    pub mapping: Option<PathBuf>,
    /// Base URL of the text-generation endpoint.
    #[arg(long, env = "PIIMASK_ENDPOINT_URL", global = true)]
    pub endpoint_url: Option<String>,
    /// Per-request endpoint timeout in seconds.
    #[arg(long, default_value_t = 30.0, global = true)]
    pub timeout: f64,
    /// Retries on transient endpoint failures.
    #[arg(long, default_value_t = 2, global = true)]
    pub retries: u32,
    /// Prompt template used with the endpoint backend.
    #[arg(long, value_enum, default_value = "seq2seq", global = true)]
    pub template: TemplateArg,
    /// Environment variable holding the endpoint bearer token.
    #[arg(long, default_value = "PIIMASK_ENDPOINT_TOKEN", global = true)]
    pub auth_env: String,
}

impl BackendArgs {
    pub fn mapping_table(&self) -> anyhow::Result<MappingTable> {
        Ok(match &self.mapping {
            Some(p) => MappingTable::from_file(p)?,
            None => MappingTable::default(),
        })
    }

    pub fn regex_suite(&self) -> anyhow::Result<RegexSuite> {
        Ok(match &self.patterns {
            Some(p) => RegexSuite::from_file(p)?,
            None => RegexSuite::default(),
        })
    }

    pub fn endpoint_config(&self) -> anyhow::Result<EndpointConfig> {
        let url = self
            .endpoint_url
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("--endpoint-url is required with --backend endpoint"))?;
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            anyhow::bail!("--timeout must be a positive number of seconds");
        }
        let mut cfg = EndpointConfig::new(url);
        cfg.timeout = Duration::from_secs_f64(self.timeout);
        cfg.max_retries = self.retries;
        cfg.auth_env = Some(self.auth_env.clone());
        Ok(cfg)
    }

    pub fn prompt_template(&self) -> PromptTemplate {
        PromptTemplate::for_kind(match self.template {
            TemplateArg::Seq2seq => TemplateKind::Seq2seq,
            TemplateArg::Causal => TemplateKind::Causal,
        })
    }

    pub fn build(&self) -> anyhow::Result<Backend> {
        Ok(match self.backend {
            BackendKind::Regex => Backend::Regex(self.regex_suite()?),
            BackendKind::Endpoint => {
                let client = EndpointClient::new(self.endpoint_config()?)?;
                let mut det = EndpointDetector::new(client, self.prompt_template());
                det.mapping = self.mapping_table()?;
                Backend::Endpoint(Box::new(det))
            }
        })
    }
}

/// The one active masking backend.
#[derive(Debug)]
pub enum Backend {
    Regex(RegexSuite),
    Endpoint(Box<EndpointDetector>),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Regex(_) => "regex",
            Backend::Endpoint(_) => "endpoint",
        }
    }

    /// Blocking health probe; the regex backend is always healthy.
    pub fn healthy(&self) -> bool {
        match self {
            Backend::Regex(_) => true,
            Backend::Endpoint(d) => d.client.health(),
        }
    }
}

impl Detector for Backend {
    fn detect(&self, text: &str) -> Result<Vec<Entity>, DetectError> {
        match self {
            Backend::Regex(s) => s.detect(text),
            Backend::Endpoint(d) => d.detect(text),
        }
    }
}
