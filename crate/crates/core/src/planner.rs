//! Hardware build planner: bill-of-materials cost totals and the sizing
//! rules for a multi-GPU machine (PCI lanes, PSU headroom, RAM per GPU).
//!
//! Build file format: CSV with header
//! `category,description,unit_price,quantity,attrs` where `attrs` is a
//! `key=value;...` list. Descriptions must not contain commas. Two fixtures
//! transcribing a priced commodity build and a priced server build ship with
//! the crate.
//!
//! Sizing constants: 16 PCI lanes per GPU plus 4 per M.2 primary drive;
//! 32 GB RAM per GPU; GPUs budgeted at 300 W peak with a fixed 100 W
//! non-GPU, non-CPU overhead.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const LANES_PER_GPU: u64 = 16;
pub const LANES_PER_M2: u64 = 4;
pub const RAM_GB_PER_GPU: u64 = 32;
pub const GPU_PEAK_WATTS: u64 = 300;
pub const OVERHEAD_WATTS: u64 = 100;

pub const COMMODITY_FIXTURE: &str = include_str!("../fixtures/commodity.csv");
pub const SERVER_FIXTURE: &str = include_str!("../fixtures/server.csv");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlannerError {
    #[error("line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("bad build file header")]
    BadHeader,
    #[error("{category} component {description:?} is missing attribute {attr}")]
    MissingAttribute {
        category: Category,
        description: String,
        attr: &'static str,
    },
    #[error("invalid build: {0}")]
    InvalidBuild(String),
}

/// Exact-cent currency amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default)]
pub struct Money(pub i64);

impl Money {
    pub fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    pub fn cents(self) -> i64 {
        self.0
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, (self.0 % 100).abs())
    }
}

impl FromStr for Money {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("bad currency amount {s:?}");
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 2 {
            return Err(err());
        }
        let mut cents: i64 = whole.parse::<i64>().map_err(|_| err())? * 100;
        if !frac.is_empty() {
            if !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(err());
            }
            let mut f: i64 = frac.parse().map_err(|_| err())?;
            if frac.len() == 1 {
                f *= 10;
            }
            cents += f;
        }
        Ok(Money(cents))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Motherboard,
    Psu,
    Cpu,
    Cooling,
    Ram,
    PrimaryDrive,
    DataDrive,
    Gpu,
    Case,
}

impl Category {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "motherboard" => Category::Motherboard,
            "psu" => Category::Psu,
            "cpu" => Category::Cpu,
            "cooling" => Category::Cooling,
            "ram" => Category::Ram,
            "primary_drive" => Category::PrimaryDrive,
            "data_drive" => Category::DataDrive,
            "gpu" => Category::Gpu,
            "case" => Category::Case,
            _ => return None,
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Motherboard => "motherboard",
            Category::Psu => "psu",
            Category::Cpu => "cpu",
            Category::Cooling => "cooling",
            Category::Ram => "ram",
            Category::PrimaryDrive => "primary_drive",
            Category::DataDrive => "data_drive",
            Category::Gpu => "gpu",
            Category::Case => "case",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComponentAttrs {
    pub pci_lanes_provided: Option<u64>,
    pub pci_lanes_required: Option<u64>,
    pub watts_peak: Option<u64>,
    pub ram_gb: Option<u64>,
    pub psu_watts: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSpec {
    pub category: Category,
    pub description: String,
    pub unit_price: Money,
    pub quantity: u64,
    pub attrs: ComponentAttrs,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildConfig {
    pub name: String,
    pub components: Vec<ComponentSpec>,
    /// Vendor-stated total, when the source lists one; compared against the
    /// line-item sum and reported when they differ.
    pub stated_total: Option<Money>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckResult {
    Ok,
    PciViolation { needed: u64, provided: u64 },
    PsuViolation { peak_watts: u64, psu_watts: u64 },
    RamViolation { have_gb: u64, need_gb: u64 },
}

impl CheckResult {
    pub fn is_ok(self) -> bool {
        matches!(self, CheckResult::Ok)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub more_expensive: String,
    pub less_expensive: String,
    /// max/min scaled by 100 and rounded to the nearest hundredth.
    pub ratio_hundredths: i64,
}

impl Comparison {
    pub fn ratio_string(&self) -> String {
        format!(
            "{}.{:02}",
            self.ratio_hundredths / 100,
            self.ratio_hundredths % 100
        )
    }
}

impl BuildConfig {
    pub fn parse(name: &str, text: &str) -> Result<Self, PlannerError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(PlannerError::BadHeader)?;
        if header.trim() != "category,description,unit_price,quantity,attrs" {
            return Err(PlannerError::BadHeader);
        }
        let mut components = Vec::new();
        let mut stated_total = None;
        for (i, raw) in lines.enumerate() {
            let lineno = i + 2;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| PlannerError::BadLine { line: lineno, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            }
            let category = Category::parse(fields[0].trim())
                .ok_or_else(|| bad(format!("unknown category {:?}", fields[0])))?;
            let unit_price: Money = fields[2].trim().parse().map_err(bad)?;
            let quantity: u64 = fields[3]
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad quantity {:?}", fields[3])))?;
            if quantity == 0 {
                return Err(bad("quantity must be positive".to_string()));
            }
            let mut attrs = ComponentAttrs::default();
            for pair in fields[4].split(';').filter(|p| !p.trim().is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad attribute {pair:?}")))?;
                match key.trim() {
                    "stated_total" => {
                        stated_total = Some(value.trim().parse().map_err(bad)?);
                        continue;
                    }
                    _ => {}
                }
                let num: u64 = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad attribute value {value:?}")))?;
                match key.trim() {
                    "pci_lanes_provided" => attrs.pci_lanes_provided = Some(num),
                    "pci_lanes_required" => attrs.pci_lanes_required = Some(num),
                    "watts_peak" => attrs.watts_peak = Some(num),
                    "ram_gb" => attrs.ram_gb = Some(num),
                    "psu_watts" => attrs.psu_watts = Some(num),
                    other => return Err(bad(format!("unknown attribute {other:?}"))),
                }
            }
            if category == Category::Gpu
                && (attrs.pci_lanes_required.is_none() || attrs.watts_peak.is_none())
            {
                return Err(bad(
                    "gpu lines must carry pci_lanes_required and watts_peak".to_string(),
                ));
            }
            components.push(ComponentSpec {
                category,
                description: fields[1].trim().to_string(),
                unit_price,
                quantity,
                attrs,
            });
        }
        let build = BuildConfig {
            name: name.to_string(),
            components,
            stated_total,
        };
        build.validate()?;
        Ok(build)
    }

    fn validate(&self) -> Result<(), PlannerError> {
        let count = |c: Category| self.components.iter().filter(|s| s.category == c).count();
        if count(Category::Motherboard) != 1 {
            return Err(PlannerError::InvalidBuild(
                "exactly one motherboard required".to_string(),
            ));
        }
        if count(Category::Cpu) < 1 || count(Category::Psu) < 1 {
            return Err(PlannerError::InvalidBuild(
                "at least one cpu and one psu required".to_string(),
            ));
        }
        Ok(())
    }

    fn gpu_count(&self) -> u64 {
        self.components
            .iter()
            .filter(|c| c.category == Category::Gpu)
            .map(|c| c.quantity)
            .sum()
    }

    fn m2_count(&self) -> u64 {
        self.components
            .iter()
            .filter(|c| c.category == Category::PrimaryDrive && c.attrs.pci_lanes_required.is_some())
            .map(|c| c.quantity)
            .sum()
    }

    /// Line-item sum in exact cents.
    pub fn total_cost(&self) -> Money {
        Money(
            self.components
                .iter()
                .map(|c| c.unit_price.cents() * c.quantity as i64)
                .sum(),
        )
    }

    /// The total used for comparisons: the vendor-stated figure when one is
    /// on record, else the line-item sum.
    pub fn effective_total(&self) -> Money {
        self.stated_total.unwrap_or_else(|| self.total_cost())
    }

    /// Difference between the stated total and the line-item sum, when a
    /// stated total exists and disagrees.
    pub fn stated_discrepancy(&self) -> Option<Money> {
        let stated = self.stated_total?;
        let computed = self.total_cost();
        (stated != computed).then(|| Money((computed.cents() - stated.cents()).abs()))
    }

    /// 16 lanes per GPU plus 4 per M.2 drive must be covered by the CPUs.
    pub fn check_pci_lanes(&self) -> Result<CheckResult, PlannerError> {
        let needed = LANES_PER_GPU * self.gpu_count() + LANES_PER_M2 * self.m2_count();
        let mut provided = 0;
        for c in self.components.iter().filter(|c| c.category == Category::Cpu) {
            let lanes = c.attrs.pci_lanes_provided.ok_or(PlannerError::MissingAttribute {
                category: c.category,
                description: c.description.clone(),
                attr: "pci_lanes_provided",
            })?;
            provided += lanes * c.quantity;
        }
        Ok(if provided >= needed {
            CheckResult::Ok
        } else {
            CheckResult::PciViolation { needed, provided }
        })
    }

    /// Peak component draw plus the fixed overhead must fit the PSU rating.
    pub fn check_psu(&self) -> Result<CheckResult, PlannerError> {
        let mut psu_watts = 0;
        for c in self.components.iter().filter(|c| c.category == Category::Psu) {
            let watts = c.attrs.psu_watts.ok_or(PlannerError::MissingAttribute {
                category: c.category,
                description: c.description.clone(),
                attr: "psu_watts",
            })?;
            psu_watts += watts * c.quantity;
        }
        let draw: u64 = self
            .components
            .iter()
            .filter(|c| c.category != Category::Psu)
            .map(|c| c.attrs.watts_peak.unwrap_or(0) * c.quantity)
            .sum();
        let peak_watts = draw + OVERHEAD_WATTS;
        Ok(if peak_watts <= psu_watts {
            CheckResult::Ok
        } else {
            CheckResult::PsuViolation { peak_watts, psu_watts }
        })
    }

    /// 32 GB of system RAM per GPU, boundary inclusive.
    pub fn check_ram(&self) -> Result<CheckResult, PlannerError> {
        let need_gb = RAM_GB_PER_GPU * self.gpu_count();
        let mut have_gb = 0;
        for c in self.components.iter().filter(|c| c.category == Category::Ram) {
            let gb = c.attrs.ram_gb.ok_or(PlannerError::MissingAttribute {
                category: c.category,
                description: c.description.clone(),
                attr: "ram_gb",
            })?;
            have_gb += gb * c.quantity;
        }
        Ok(if have_gb >= need_gb {
            CheckResult::Ok
        } else {
            CheckResult::RamViolation { have_gb, need_gb }
        })
    }
}

/// Cost ratio between two builds: max/min to 2 decimals, naming the more
/// expensive build. Uses each build's effective total.
pub fn compare(a: &BuildConfig, b: &BuildConfig) -> Comparison {
    let (hi, lo) = if a.effective_total() >= b.effective_total() {
        (a, b)
    } else {
        (b, a)
    };
    let hi_cents = hi.effective_total().cents();
    let lo_cents = lo.effective_total().cents();
    // round(100 * hi / lo) in integer arithmetic
    let ratio_hundredths = (100 * hi_cents + lo_cents / 2) / lo_cents;
    Comparison {
        more_expensive: hi.name.clone(),
        less_expensive: lo.name.clone(),
        ratio_hundredths,
    }
}
