use crowbar_core::boot::ImageParams;
use crowbar_core::campaign::{Budget, LogRecord};
use crowbar_core::config::CampaignConfig;
use crowbar_core::crypto::Fek2Select;
use crowbar_core::device::{DeviceBundle, DeviceSpec};
use crowbar_core::pipeline::{attack, report};
use crowbar_core::search::ParamGrid;

fn cfg(seed: u64) -> CampaignConfig {
    CampaignConfig {
        seed,
        ..Default::default()
    }
}

#[test]
fn default_attack_recovers_rom_and_mb1() {
    let bundle = DeviceBundle::generate(&DeviceSpec::default()).unwrap();
    let out = attack(&cfg(7), &bundle, None).unwrap();
    assert!(out.succeeded());
    let e = out.exploit.unwrap();
    assert_eq!(e.keys.nvkey, bundle.secrets.nvkey);
    assert_eq!(e.keys.testkey, bundle.secrets.testkey);
    assert_eq!(out.campaign.stats.successes, 1);
    let (lo, hi) = (2_600_000, 2_615_000);
    assert!((lo..hi).contains(&e.attempt.offset_ns), "{}", e.attempt.offset_ns);
}

#[test]
fn attack_on_device_variants() {
    for (odm, sel, seed) in [
        (true, Fek2Select::Testkey, 1),
        (true, Fek2Select::Nvkey, 2),
        (false, Fek2Select::Nvkey, 3),
    ] {
        let bundle = DeviceBundle::generate(&DeviceSpec {
            seed,
            odm_secure_boot: odm,
            fek2_select: sel,
            ..Default::default()
        })
        .unwrap();
        let out = attack(&cfg(seed), &bundle, None).unwrap();
        assert!(out.succeeded(), "odm={odm} {sel:?}");
        assert_eq!(out.exploit.unwrap().keys.odm_secure_boot, odm);
    }
}

#[test]
fn multi_worker_attack_succeeds() {
    let bundle = DeviceBundle::generate(&DeviceSpec::default()).unwrap();
    let c = CampaignConfig { workers: 4, ..cfg(11) };
    let out = attack(&c, &bundle, None).unwrap();
    assert!(out.succeeded());
    assert_eq!(out.campaign.workers.len(), 4);
}

#[test]
fn interrupted_attack_resumes_identically() {
    let bundle = DeviceBundle::generate(&DeviceSpec::default()).unwrap();
    let mut c = cfg(7);
    c.budget.checkpoint_every = 50;
    let full = attack(&c, &bundle, None).unwrap();
    let cut = full.campaign.records.len() / 2;
    let resumed = attack(&c, &bundle, Some(&full.campaign.records[..cut])).unwrap();
    assert_eq!(resumed, full);
    assert!(report(&full.campaign.records).contains("successes"));
}

#[test]
fn hardened_image_exhausts_budget() {
    let bundle = DeviceBundle::generate(&DeviceSpec {
        image: ImageParams {
            hardened: true,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap();
    let c = CampaignConfig {
        grid: ParamGrid::new(2_585_200, 2_634_800, 20, vec![11_300, 11_320, 11_340]),
        budget: Budget {
            max_attempts: Some(3_000),
            ..Default::default()
        },
        ..cfg(5)
    };
    let out = attack(&c, &bundle, None).unwrap();
    assert!(out.exploit.is_none());
    assert_eq!((out.campaign.stats.attempts, out.campaign.stats.successes), (3_000, 0));
    assert!(matches!(out.campaign.records.last(), Some(LogRecord::Summary(_))));
}
