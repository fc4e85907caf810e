//! Layered configuration.
//!
//! Every subcommand option is resolved in this order, first hit wins:
//!
//! 1. the command-line flag (`--n-nodes 16`);
//! 2. the key in the command's section of the `--config` TOML file
//!    (`[generate]` then `n-nodes = 16`);
//! 3. the built-in default shown in `--help`.
//!
//! Keys use the flag spelling without the leading dashes. Unknown sections
//! or keys are usage errors, so a typo cannot silently fall back to a
//! default. The resolved values are what the run manifest records.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::UsageError;

/// A comma-separated list on the command line, or an array in TOML.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: fmt::Display,
{
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl<'de, T> Deserialize<'de> for List<T>
where
    T: Deserialize<'de> + FromStr,
    T::Err: fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Seq(Vec<T>),
            Str(String),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Seq(v) => Ok(List(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl<T: Serialize> Serialize for List<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

/// Declares a subcommand's options twice over: a flag/file struct where
/// every field is optional, and the resolved struct with defaults applied.
/// Defaults are written as strings and parsed like a flag value would be.
/// Fields under `optional` have no default and stay `Option` when resolved.
macro_rules! options {
    (
        $(#[$meta:meta])*
        $args:ident => $resolved:ident {
            $( $field:ident : $ty:ty = $default:literal => $help:literal, )*
            $( @optional { $( $ofield:ident : $oty:ty => $ohelp:literal, )* } )?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, clap::Args, serde::Deserialize)]
        #[serde(deny_unknown_fields, rename_all = "kebab-case")]
        pub struct $args {
            $(
                #[arg(long, value_name = "VALUE", num_args = 0..=1, default_missing_value = "true",
                      help = concat!($help, " [default: ", $default, "]"))]
                pub $field: Option<$ty>,
            )*
            $($(
                #[arg(long, value_name = "VALUE", help = $ohelp)]
                pub $ofield: Option<$oty>,
            )*)?
        }

        #[derive(Debug, Clone, serde::Serialize)]
        #[serde(rename_all = "kebab-case")]
        pub struct $resolved {
            $( pub $field: $ty, )*
            $($( pub $ofield: Option<$oty>, )*)?
        }

        impl $args {
            /// Flags over file values over defaults.
            pub fn resolve(self, file: Option<$args>) -> $resolved {
                let file = file.unwrap_or_default();
                $resolved {
                    $( $field: self.$field.or(file.$field)
                        .unwrap_or_else(|| $crate::config::parse_default($default)), )*
                    $($( $ofield: self.$ofield.or(file.$ofield), )*)?
                }
            }
        }
    };
}
pub(crate) use options;

pub fn parse_default<T: FromStr>(text: &str) -> T
where
    T::Err: fmt::Display,
{
    text.parse()
        .unwrap_or_else(|e| panic!("built-in default {text:?} does not parse: {e}"))
}

/// A parsed `--config` file: one TOML table per subcommand.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, toml::Value>,
}

pub const SECTIONS: [&str; 11] =
    ["generate", "train", "eval", "probe", "patch", "scrub", "knockout", "circuits", "lens", "stats", "viz"];

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let table: toml::Table = text.parse().map_err(|e| UsageError(format!("config file: {e}")))?;
        let mut sections = BTreeMap::new();
        for (name, value) in table {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(UsageError(format!("config file: unknown section [{name}]")));
            }
            if !value.is_table() {
                return Err(UsageError(format!("config file: `{name}` must be a [section]")));
            }
            sections.insert(name, value);
        }
        Ok(ConfigFile { sections })
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The section for `command`, deserialized into its flag struct.
    pub fn section<T: DeserializeOwned>(&self, command: &str) -> Result<Option<T>, UsageError> {
        self.sections
            .get(command)
            .map(|v| {
                v.clone()
                    .try_into()
                    .map_err(|e| UsageError(format!("config file [{command}]: {e}")))
            })
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    options! {
        DemoArgs => Demo {
            count: usize = "10" => "Number of things",
            name: String = "x" => "A name",
            layers: List<usize> = "1,2" => "Blocks",
            on: bool = "false" => "A switch",
            @optional {
                extra: u64 => "Something optional",
            }
        }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file = ConfigFile::parse("[generate]\ncount = 5\nname = \"file\"\nlayers = [3]\nextra = 9\n").unwrap();
        let from_file: DemoArgs = file.section("generate").unwrap().unwrap();
        let flags = DemoArgs { count: Some(7), ..Default::default() };
        let r = flags.resolve(Some(from_file));
        assert_eq!((r.count, r.name.as_str(), r.layers.0.as_slice(), r.extra), (7, "file", &[3][..], Some(9)));

        let r = DemoArgs::default().resolve(None);
        assert_eq!((r.count, r.name.as_str(), r.layers.0.as_slice(), r.extra), (10, "x", &[1, 2][..], None));
    }

    #[test]
    fn bare_switches_mean_true() {
        use clap::Parser;
        #[derive(Parser)]
        struct Cli {
            #[command(flatten)]
            demo: DemoArgs,
        }
        let c = Cli::try_parse_from(["x", "--on", "--count", "3"]).unwrap();
        assert_eq!((c.demo.on, c.demo.count), (Some(true), Some(3)));
        let c = Cli::try_parse_from(["x", "--on", "false"]).unwrap();
        assert_eq!(c.demo.on, Some(false));
        assert!(Cli::try_parse_from(["x", "--count"]).is_err());
    }

    #[test]
    fn unknown_keys_and_sections_are_usage_errors() {
        assert!(ConfigFile::parse("[nope]\na = 1\n").is_err());
        assert!(ConfigFile::parse("top = 1\n").is_err());
        let f = ConfigFile::parse("[generate]\ncuont = 5\n").unwrap();
        assert!(f.section::<DemoArgs>("generate").is_err());
        assert!(f.section::<DemoArgs>("train").unwrap().is_none());
    }

    #[test]
    fn lists_parse_from_both_spellings() {
        assert_eq!("1, 2,3".parse::<List<usize>>().unwrap(), List(vec![1, 2, 3]));
        assert!("1,a".parse::<List<usize>>().is_err());
        let f = ConfigFile::parse("[generate]\nlayers = \"4,5\"\n").unwrap();
        let a: DemoArgs = f.section("generate").unwrap().unwrap();
        assert_eq!(a.layers, Some(List(vec![4, 5])));
    }
}
