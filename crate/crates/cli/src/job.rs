//! Progress reporting for long-running commands.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub progress: f64,
    pub message: String,
}

impl JobStatus {
    pub fn new(job_id: impl Into<String>) -> Self {
        JobStatus { job_id: job_id.into(), state: JobState::Queued, progress: 0.0, message: String::new() }
    }

    /// Moves to `state` with `progress`. States only move forward
    /// (queued → running → done|failed), terminal states are final and
    /// progress never decreases.
    pub fn advance(&mut self, state: JobState, progress: f64, message: impl Into<String>) -> Result<(), String> {
        if self.state.is_terminal() {
            return Err(format!("job {} already {:?}", self.job_id, self.state));
        }
        if state < self.state {
            return Err(format!("job {}: {:?} cannot follow {:?}", self.job_id, state, self.state));
        }
        if !(0.0..=1.0).contains(&progress) || progress < self.progress {
            return Err(format!("job {}: progress {progress} after {}", self.job_id, self.progress));
        }
        self.state = state;
        self.progress = progress;
        self.message = message.into();
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("status serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_transitions() {
        let mut j = JobStatus::new("t");
        j.advance(JobState::Running, 0.0, "stage1").unwrap();
        j.advance(JobState::Running, 0.5, "stage2").unwrap();
        j.advance(JobState::Done, 1.0, "").unwrap();
        assert_eq!(j.state, JobState::Done);
    }

    #[test]
    fn no_going_back() {
        let mut j = JobStatus::new("t");
        j.advance(JobState::Running, 0.3, "").unwrap();
        assert!(j.advance(JobState::Queued, 0.3, "").is_err());
        assert!(j.advance(JobState::Running, 0.2, "").is_err());
        j.advance(JobState::Failed, 0.3, "boom").unwrap();
        assert!(j.advance(JobState::Done, 1.0, "").is_err());
        assert!(j.advance(JobState::Failed, 1.0, "").is_err());
    }

    #[test]
    fn queued_can_fail_directly() {
        let mut j = JobStatus::new("t");
        j.advance(JobState::Failed, 0.0, "bad config").unwrap();
        assert_eq!(j.to_json(), r#"{"job_id":"t","state":"failed","progress":0.0,"message":"bad config"}"#);
    }
}
