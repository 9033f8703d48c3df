use clap::ValueEnum;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum OutputFormat {
    #[default]
    Human,
    /// One JSON object per line.
    Jsonl,
}

#[derive(Debug, Clone, Copy)]
pub struct Printer {
    pub format: OutputFormat,
}

impl Printer {
    /// Prints `human` or the JSON record, depending on the format.
    pub fn emit(&self, record: Value, human: impl FnOnce() -> String) {
        match self.format {
            OutputFormat::Human => println!("{}", human()),
            OutputFormat::Jsonl => println!("{record}"),
        }
    }

    /// Human-only text such as table headers.
    pub fn note(&self, text: &str) {
        if self.format == OutputFormat::Human {
            println!("{text}");
        }
    }
}
