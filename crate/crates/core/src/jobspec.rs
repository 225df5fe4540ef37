//! Directive-based job file parsing and rendering (sbatch/srun analogues).
//!
//! A job file is a script whose first line is a shebang, whose `#SBATCH`
//! lines carry resource directives, and which contains exactly one command
//! line. Example:
//!
//! ```text
//! #!/bin/bash
//! #SBATCH -N 1
//! #SBATCH --job-name=test
//! #SBATCH --time=2-00:00
//! #SBATCH --mem=36000
//! #SBATCH --qos=normal
//! #SBATCH --gres=gpu:1
//! srun python test.py
//! ```

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JobSpecError {
    #[error("job file contains no command line")]
    MissingCommand,
    #[error("duplicate directive --{0}")]
    DuplicateDirective(String),
    #[error("bad value for --{key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown directive --{0}")]
    UnknownDirective(String),
}

/// A parsed job submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRequest {
    pub nodes: u32,
    pub job_name: String,
    pub output_path: String,
    pub error_path: String,
    pub time_limit_min: u64,
    pub mem_mb: u64,
    pub qos: String,
    pub gpus: u32,
    pub command: Vec<String>,
}

impl Default for JobRequest {
    fn default() -> Self {
        JobRequest {
            nodes: 1,
            job_name: "job".to_string(),
            output_path: "slurm-<jobid>.out".to_string(),
            error_path: "slurm-<jobid>.out".to_string(),
            time_limit_min: 60,
            mem_mb: 1024,
            qos: "normal".to_string(),
            gpus: 0,
            command: Vec::new(),
        }
    }
}

impl JobRequest {
    /// Checks the structural invariants (positive counts, non-empty command).
    pub fn validate(&self) -> Result<(), JobSpecError> {
        if self.nodes < 1 {
            return Err(bad("N", &self.nodes.to_string()));
        }
        if self.time_limit_min < 1 {
            return Err(bad("time", &self.time_limit_min.to_string()));
        }
        if self.mem_mb < 1 {
            return Err(bad("mem", &self.mem_mb.to_string()));
        }
        if self.job_name.is_empty() {
            return Err(bad("job-name", ""));
        }
        if self.command.is_empty() {
            return Err(JobSpecError::MissingCommand);
        }
        Ok(())
    }
}

fn bad(key: &str, value: &str) -> JobSpecError {
    JobSpecError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    }
}

/// Parse a time-limit string into whole minutes.
///
/// Accepted shapes: `M` (bare minutes), `HH:MM:SS`, `D-HH:MM`, `D-HH:MM:SS`.
/// Leftover seconds round up to a full minute.
pub fn parse_time_limit(s: &str) -> Result<u64, JobSpecError> {
    let err = || bad("time", s);
    let uint = |p: &str| -> Result<u64, JobSpecError> {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        p.parse().map_err(|_| err())
    };
    let minutes = if let Some((days, rest)) = s.split_once('-') {
        let d = uint(days)?;
        let parts: Vec<&str> = rest.split(':').collect();
        match parts.as_slice() {
            // D-HH:MM
            [h, m] => {
                let (h, m) = (uint(h)?, uint(m)?);
                if m >= 60 {
                    return Err(err());
                }
                d * 1440 + h * 60 + m
            }
            // D-HH:MM:SS
            [h, m, sec] => {
                let (h, m, sec) = (uint(h)?, uint(m)?, uint(sec)?);
                if m >= 60 || sec >= 60 {
                    return Err(err());
                }
                d * 1440 + h * 60 + m + u64::from(sec > 0)
            }
            _ => return Err(err()),
        }
    } else if s.contains(':') {
        // HH:MM:SS
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            [h, m, sec] => {
                let (h, m, sec) = (uint(h)?, uint(m)?, uint(sec)?);
                if m >= 60 || sec >= 60 {
                    return Err(err());
                }
                h * 60 + m + u64::from(sec > 0)
            }
            _ => return Err(err()),
        }
    } else {
        uint(s)?
    };
    if minutes == 0 {
        return Err(err());
    }
    Ok(minutes)
}

/// Parse a gres directive value of the shape `gpu:<count>`.
pub fn parse_gres(s: &str) -> Result<u32, JobSpecError> {
    let err = || bad("gres", s);
    let (name, count) = s.split_once(':').ok_or_else(err)?;
    if name != "gpu" {
        return Err(err());
    }
    if count.is_empty() || !count.bytes().all(|b| b.is_ascii_digit()) {
        return Err(err());
    }
    count.parse().map_err(|_| err())
}

const DIRECTIVE_PREFIX: &str = "#SBATCH ";

/// Parse a full job file into a [`JobRequest`].
pub fn parse_job_file(text: &str) -> Result<JobRequest, JobSpecError> {
    let mut req = JobRequest::default();
    let mut seen: Vec<String> = Vec::new();
    let mut command: Option<Vec<String>> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if lineno == 0 && line.starts_with("#!") {
            continue;
        }
        if let Some(directive) = line.strip_prefix(DIRECTIVE_PREFIX) {
            let directive = directive.trim();
            let (key, value) = split_directive(directive)?;
            if seen.iter().any(|k| k == &key) {
                return Err(JobSpecError::DuplicateDirective(key));
            }
            apply_directive(&mut req, &key, &value)?;
            seen.push(key);
        } else if line.starts_with('#') {
            // plain comment line
            continue;
        } else {
            if command.is_some() {
                // a second runnable line violates the one-command contract
                return Err(JobSpecError::BadValue {
                    key: "command".to_string(),
                    value: line.to_string(),
                });
            }
            command = Some(line.split_whitespace().map(str::to_string).collect());
        }
    }

    req.command = command.ok_or(JobSpecError::MissingCommand)?;
    req.validate()?;
    Ok(req)
}

/// Split one directive into its canonical key and value.
///
/// Accepts `--key=value` for all keys, and additionally the short form
/// `-N <value>` for the node count. A trailing `# comment` after the value
/// is stripped (the reference job file annotates its `-N` line this way);
/// any other trailing token is an error.
fn split_directive(directive: &str) -> Result<(String, String), JobSpecError> {
    if let Some(rest) = directive.strip_prefix("-N ") {
        let value = strip_trailing_comment("N", rest.trim())?;
        if value.is_empty() {
            return Err(bad("N", value));
        }
        return Ok(("N".to_string(), value.to_string()));
    }
    let long = directive
        .strip_prefix("--")
        .ok_or_else(|| JobSpecError::UnknownDirective(directive.to_string()))?;
    let (key, value) = long
        .split_once('=')
        .ok_or_else(|| JobSpecError::UnknownDirective(long.to_string()))?;
    let value = strip_trailing_comment(key, value)?;
    Ok((key.to_string(), value.to_string()))
}

fn strip_trailing_comment<'a>(key: &str, value: &'a str) -> Result<&'a str, JobSpecError> {
    match value.split_once(char::is_whitespace) {
        None => Ok(value),
        Some((head, rest)) if rest.trim_start().starts_with('#') => Ok(head),
        Some(_) => Err(bad(key, value)),
    }
}

fn apply_directive(req: &mut JobRequest, key: &str, value: &str) -> Result<(), JobSpecError> {
    match key {
        "N" | "nodes" => {
            req.nodes = value.parse().map_err(|_| bad(key, value))?;
            if req.nodes < 1 {
                return Err(bad(key, value));
            }
        }
        "job-name" => {
            if value.is_empty() {
                return Err(bad(key, value));
            }
            req.job_name = value.to_string();
        }
        "output" => req.output_path = value.to_string(),
        "error" => req.error_path = value.to_string(),
        "time" => req.time_limit_min = parse_time_limit(value)?,
        "mem" => {
            req.mem_mb = value.parse().map_err(|_| bad(key, value))?;
            if req.mem_mb < 1 {
                return Err(bad(key, value));
            }
        }
        "qos" => {
            if value.is_empty() {
                return Err(bad(key, value));
            }
            req.qos = value.to_string();
        }
        "gres" => req.gpus = parse_gres(value)?,
        other => return Err(JobSpecError::UnknownDirective(other.to_string())),
    }
    Ok(())
}

/// Render a [`JobRequest`] back into job-file text.
///
/// Directives are emitted in a fixed canonical order so that
/// `parse_job_file(render_job_file(r)) == r`.
pub fn render_job_file(req: &JobRequest) -> String {
    let mut out = String::from("#!/bin/bash\n");
    out.push_str(&format!("#SBATCH -N {}\n", req.nodes));
    out.push_str(&format!("#SBATCH --job-name={}\n", req.job_name));
    out.push_str(&format!("#SBATCH --output={}\n", req.output_path));
    out.push_str(&format!("#SBATCH --error={}\n", req.error_path));
    out.push_str(&format!(
        "#SBATCH --time={}\n",
        render_time_limit(req.time_limit_min)
    ));
    out.push_str(&format!("#SBATCH --mem={}\n", req.mem_mb));
    out.push_str(&format!("#SBATCH --qos={}\n", req.qos));
    out.push_str(&format!("#SBATCH --gres=gpu:{}\n", req.gpus));
    out.push_str(&req.command.join(" "));
    out.push('\n');
    out
}

/// Render minutes in the `D-HH:MM` grammar.
pub fn render_time_limit(minutes: u64) -> String {
    let days = minutes / 1440;
    let hours = (minutes % 1440) / 60;
    let mins = minutes % 60;
    format!("{}-{:02}:{:02}", days, hours, mins)
}
