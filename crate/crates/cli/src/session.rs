//! Line-oriented custodian session: declarations arrive over the chosen
//! transport, rules decide, and unmatched ones are put to the user.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};

use ioconsent::beacon::{BeaconEndpoint, RadioBus, Scanner};
use ioconsent::pdc::{load_rules, save_rules, Answer, ConsentRule, Decision, Pdc};
use ioconsent::policy::render_policy;
use ioconsent::registry::{HttpClient, LocalClient, Registry, RegistryApi, Role, TokenEntry, TokenTable};
use ioconsent::scenario::{ScenarioScript, Transport};
use ioconsent::state::{Declaration, Position, SubjectDeviceId};

use crate::{load_script, parse_transport};

#[derive(Args)]
pub struct PdcArgs {
    #[command(subcommand)]
    action: Option<PdcAction>,
    /// Rule file (JSON list, in precedence order). Created on first save.
    #[arg(long, env = "IOCONSENT_RULES", global = true, default_value = "rules.json")]
    rules: PathBuf,
    #[arg(long, env = "IOCONSENT_TRANSPORT", value_parser = parse_transport, default_value = "beacon")]
    transport: Transport,
    /// Script whose devices make up the surroundings.
    #[arg(long, env = "IOCONSENT_SCENARIO", default_value = "anpr_basic")]
    scenario: String,
    /// Remote registry base URL; the script devices are used otherwise.
    #[arg(long)]
    registry: Option<String>,
    /// Fixed position "x,y" in meters; by default the session visits every device.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    at: Option<Position>,
    /// Lookahead radius in meters for registry queries.
    #[arg(long, default_value_t = 0.0)]
    radius: f64,
}

#[derive(Subcommand)]
enum PdcAction {
    /// Inspect the rule file.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
    },
}

#[derive(Subcommand)]
enum RulesAction {
    /// Print the rules in precedence order.
    List,
}

fn parse_point(text: &str) -> Result<Position, String> {
    let (x, y) = text.split_once(',').ok_or("expected x,y")?;
    let x: f64 = x.trim().parse().map_err(|e| format!("{e}"))?;
    let y: f64 = y.trim().parse().map_err(|e| format!("{e}"))?;
    Ok(Position::from_meters(x, y))
}

pub fn run(args: PdcArgs) -> Result<ExitCode> {
    let rules = load_rules(&args.rules).with_context(|| format!("loading {}", args.rules.display()))?;
    if let Some(PdcAction::Rules { action: RulesAction::List }) = args.action {
        list(&rules);
        return Ok(ExitCode::SUCCESS);
    }
    let script = load_script(&args.scenario)?;
    let declarations = match args.transport {
        Transport::Beacon => over_beacon(&script, args.at),
        Transport::Registry => over_registry(&script, &args)?,
    };
    let mut pdc = Pdc::new(SubjectDeviceId::mac([2, 0, 0, 0, 0, 1]), 0).with_rules(rules);
    let stdin = std::io::stdin();
    let mut input = stdin.lock().lines();
    for decl in &declarations {
        show(decl);
        let before = pdc.rules().to_vec();
        let decision = match pdc.evaluate(decl, 0) {
            Decision::Prompt => match ask(&mut input)? {
                Some(answer) => pdc.handle_prompt(decl, answer).decision,
                None => {
                    println!("no answer");
                    Decision::Refuse
                }
            },
            other => other,
        };
        match decision {
            Decision::Consent(p) => {
                println!("consented");
                println!("  {}", render_policy(&p));
            }
            Decision::Refuse | Decision::Prompt => println!("refused"),
        }
        if pdc.rules() != before.as_slice() {
            persist(&args.rules, pdc.rules())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn list(rules: &[ConsentRule]) {
    if rules.is_empty() {
        println!("no rules");
    }
    for (i, r) in rules.iter().enumerate() {
        println!("{}. {}", i + 1, serde_json::to_string(r).expect("rules serialize"));
    }
}

fn persist(path: &Path, rules: &[ConsentRule]) -> Result<()> {
    save_rules(path, rules).with_context(|| format!("saving {}", path.display()))
}

fn show(decl: &Declaration) {
    let p = &decl.profile;
    let name = decl.device_id.label().map(str::to_owned).unwrap_or_else(|| decl.device_id.to_hex());
    println!(
        "declaration {name}: {} within {} m of ({}, {})",
        p.data_type.display_name(),
        p.range.meters(),
        p.position.x_meters(),
        p.position.y_meters()
    );
    println!("  {}", render_policy(&p.policy));
}

/// Reads answers until a valid letter or end of input.
fn ask(input: &mut impl Iterator<Item = std::io::Result<String>>) -> Result<Option<Answer>> {
    loop {
        print!("accept once (a), accept always (A), refuse once (r), refuse always (R)? ");
        std::io::stdout().flush()?;
        let Some(line) = input.next() else {
            println!();
            return Ok(None);
        };
        match Answer::from_letter(&line?) {
            Some(a) => return Ok(Some(a)),
            None => println!("please answer a, A, r or R"),
        }
    }
}

fn spots(script: &ScenarioScript, at: Option<Position>) -> Vec<Position> {
    match at {
        Some(p) => vec![p],
        None => script.devices.iter().map(|d| d.position).collect(),
    }
}

/// Listens at each spot until every audible declaration is assembled.
fn over_beacon(script: &ScenarioScript, at: Option<Position>) -> Vec<Declaration> {
    let mut out: Vec<Declaration> = Vec::new();
    for spot in spots(script, at) {
        let mut beacons: Vec<BeaconEndpoint> = script
            .devices
            .iter()
            .filter_map(|d| BeaconEndpoint::new(d.declaration(), 0).ok())
            .collect();
        let mut bus = RadioBus::new();
        let id = bus.add_scanner(Some(spot));
        let mut scanner = Scanner::new();
        let horizon = 10_000;
        while let Some(now) = beacons.iter().map(BeaconEndpoint::next_due).min() {
            if now > horizon {
                break;
            }
            for b in beacons.iter_mut().filter(|b| b.next_due() == now) {
                b.tick(now, &mut bus);
            }
            for (_, frame) in bus.take_inbox(id) {
                if let Some(d) = scanner.receive(&frame) {
                    if !out.iter().any(|o| o.device_id == d.device_id) {
                        out.push(d);
                    }
                }
            }
        }
    }
    out
}

fn over_registry(script: &ScenarioScript, args: &PdcArgs) -> Result<Vec<Declaration>> {
    let api: Box<dyn RegistryApi> = match &args.registry {
        Some(url) => {
            if args.at.is_none() {
                bail!("--registry needs --at");
            }
            Box::new(HttpClient::new(url, None)?)
        }
        None => {
            let tokens = TokenTable::new(vec![TokenEntry {
                token: "session".into(),
                principal: "session".into(),
                role: Role::Dc,
            }]);
            let client = LocalClient::new(Arc::new(Registry::new(tokens)), Some("session"));
            for d in &script.devices {
                let decl = d.declaration();
                client.put_device(decl.device_id, decl.profile)?;
            }
            Box::new(client)
        }
    };
    let mut out: Vec<Declaration> = Vec::new();
    for spot in spots(script, args.at) {
        for record in api.nearby(&spot, args.radius)? {
            if !out.iter().any(|o| o.device_id == record.device_id) {
                out.push(record.declaration());
            }
        }
    }
    Ok(out)
}
