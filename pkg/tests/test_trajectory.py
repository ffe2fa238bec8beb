import logging
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conflict_risk.kernel import KernelConfig, SeverityThresholds
from conflict_risk.oracle import oracle_ttc, penetration_depth
from conflict_risk.synth import SceneSpec, VehicleSpec, covering_zones, crossing_scene, scene_tracks
from conflict_risk.trajectory import (
    OBS_COLUMNS,
    OUTSIDE,
    CongestionFilterConfig,
    EmptyData,
    FormatConfig,
    NonMonotoneFrames,
    SamplingConfig,
    SchemaMismatch,
    TooShort,
    VehicleTrack,
    ZoneMap,
    assign_zone,
    build_observations,
    derive_kinematics,
    format_count,
    format_summary,
    group_id,
    load_trajectories,
    observations_frame,
    pair_candidates,
    summarize_dataset,
    write_observations,
)

HEADER = "frame,vehicle_id,x,y,length,width,vehicle_class,payment,heading\n"


def _write(tmp_path, body, header=HEADER, name="t.csv"):
    p = tmp_path / name
    p.write_text(header + body)
    return p


# ---------------------------------------------------------------------------
# loading


def test_three_rows_one_track(tmp_path):
    p = _write(tmp_path, "".join(f"{f},v1,{f * 0.5},0,4.5,1.8,Taxi,Manual,0\n" for f in range(3)))
    tracks = load_trajectories(p)
    assert len(tracks) == 1 and len(tracks[0]) == 3
    assert tracks[0].vehicle_class == "Taxi"


def test_duplicate_frame_rejected(tmp_path):
    p = _write(tmp_path, "0,v1,0,0,4.5,1.8,Taxi,Manual,0\n0,v1,1,0,4.5,1.8,Taxi,Manual,0\n")
    with pytest.raises(NonMonotoneFrames):
        load_trajectories(p)


def test_empty_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with caplog.at_level(logging.WARNING):
        assert load_trajectories(p) == []
    assert "empty" in caplog.text


def test_missing_column_rejected(tmp_path):
    p = _write(tmp_path, "0,v1,0,0,4.5,Taxi,Manual\n", header="frame,vehicle_id,x,y,length,vehicle_class,payment\n")
    with pytest.raises(SchemaMismatch):
        load_trajectories(p)


def test_class_change_rejected(tmp_path):
    p = _write(tmp_path, "0,v1,0,0,4.5,1.8,Taxi,Manual,0\n1,v1,1,0,4.5,1.8,Bus,Manual,0\n")
    with pytest.raises(SchemaMismatch):
        load_trajectories(p)


def test_malformed_rows_reported_with_lines(tmp_path, caplog):
    body = "0,v1,0,0,4.5,1.8,Taxi,Manual,0\n1,v1,oops,0,4.5,1.8,Taxi,Manual,0\n2,v1,1,0,4.5,1.8,Taxi,Manual,0\n"
    p = _write(tmp_path, body)
    with caplog.at_level(logging.WARNING):
        (tr,) = load_trajectories(p)
    assert len(tr) == 2
    assert "[3]" in caplog.text


def test_column_mapping_and_delimiter(tmp_path):
    header = "f;id;cx;cy;len;wid;cls;pay\n"
    p = _write(tmp_path, "0;a;0;0;4;2;Bus;Electronic\n1;a;1;0;4;2;Bus;Electronic\n", header=header)
    fmt = FormatConfig(";", {"frame": "f", "vehicle_id": "id", "x": "cx", "y": "cy", "length": "len",
                             "width": "wid", "vehicle_class": "cls", "payment": "pay"})
    (tr,) = load_trajectories(p, fmt)
    assert tr.payment == "Electronic" and np.isnan(tr.heading).all()


def test_tracks_sorted_naturally(tmp_path):
    body = "".join(f"0,v{k},{k * 10},0,4,2,Taxi,Manual,0\n" for k in (10, 2, 1))
    assert [t.vehicle_id for t in load_trajectories(_write(tmp_path, body))] == ["v1", "v2", "v10"]


# ---------------------------------------------------------------------------
# kinematics


def _track(x, y, heading=None, vid="1", vclass="PrivateCar", payment="Manual", first=0):
    n = len(x)
    return VehicleTrack(vid, vclass, payment, np.arange(first, first + n), np.asarray(x, float),
                        np.asarray(y, float), np.full(n, 4.5), np.full(n, 1.8),
                        np.full(n, np.nan) if heading is None else np.asarray(heading, float))


def test_constant_motion_speed_and_acceleration():
    tr = derive_kinematics(_track(0.5 * np.arange(60), np.zeros(60)), 30)
    np.testing.assert_allclose(tr.speed, 15.0, atol=1e-9)
    np.testing.assert_allclose(tr.acceleration, 0.0, atol=1e-9)
    assert tr.heading[0] == pytest.approx(0.0)


def test_constant_turn_angular_speed():
    h = 10 + 0.2 * np.arange(40)
    tr = derive_kinematics(_track(np.arange(40.0), np.zeros(40), heading=h), 30)
    np.testing.assert_allclose(tr.angular_speed, 6.0, atol=1e-9)
    # counter-clockwise turn is negative under the clockwise-positive convention
    np.testing.assert_allclose(tr.angular_speed_signed, -6.0, atol=1e-9)


def test_heading_wraps_through_north():
    h = (355 + 0.5 * np.arange(30)) % 360
    tr = derive_kinematics(_track(np.arange(30.0), np.zeros(30), heading=h), 30)
    np.testing.assert_allclose(tr.angular_speed, 15.0, atol=1e-9)


def test_two_frames_minimum():
    with pytest.raises(TooShort):
        derive_kinematics(_track([0.0], [0.0]), 30)
    tr = derive_kinematics(_track([0.0, 1.0], [0.0, 0.0]), 30)
    np.testing.assert_allclose(tr.speed, 30.0)
    np.testing.assert_allclose(tr.acceleration, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 30), min_size=35, max_size=80))
def test_average_speed_is_mean_of_preceding_frames(speeds):
    x = np.concatenate([[0.0], np.cumsum(np.asarray(speeds[1:]) / 30)])
    tr = derive_kinematics(_track(x, np.zeros(len(x))), 30)
    assert np.isnan(tr.avg_speed_1s[:30]).all()
    for i in range(30, len(x)):
        assert tr.avg_speed_1s[i] == pytest.approx(np.mean(tr.speed[i - 30:i]), rel=1e-12, abs=1e-12)


# ---------------------------------------------------------------------------
# pairing and zones


def _static(vid, x, y, n=3):
    return derive_kinematics(_track(np.full(n, x) + 1e-3 * np.arange(n), np.full(n, y), vid=vid), 30)


def test_pairs_by_distance():
    assert len(pair_candidates([_static("a", 0, 0), _static("b", 10, 0)], 0, 50)) == 1
    assert pair_candidates([_static("a", 0, 0), _static("b", 60, 0)], 0, 50) == []
    trio = [_static("a", 0, 0), _static("b", 10, 0), _static("c", 0, 10)]
    assert len(pair_candidates(trio, 1, 50)) == 3


def test_pairs_need_presence():
    a = _static("a", 0, 0)
    b = derive_kinematics(_track([5.0, 5.1, 5.2], [0, 0, 0], vid="b", first=5), 30)
    assert pair_candidates([a, b], 1) == []


def _zones():
    return ZoneMap.from_dict({
        "study_area": [[0, 0], [300, 0], [300, 20], [0, 20]],
        "zones": [
            {"name": "Zone 1", "polygon": [[0, 0], [100, 0], [100, 20], [0, 20]]},
            {"name": "Zone 2", "polygon": [[100, 0], [200, 0], [200, 20], [100, 20]]},
            {"name": "Zone 3", "polygon": [[200, 0], [300, 0], [300, 20], [200, 20]]},
        ],
    })


def test_zone_assignment():
    z = _zones()
    assert assign_zone((50, 10), z) == "Zone 1"
    assert assign_zone((150, 10), z) == "Zone 2"
    assert assign_zone((500, 10), z) == OUTSIDE
    assert assign_zone((100, 10), z) == "Zone 1"  # shared edge goes to the earlier zone
    assert assign_zone((200, 5), z) == "Zone 2"


def test_zone_map_round_trip(tmp_path):
    import json

    p = tmp_path / "z.json"
    p.write_text(json.dumps(_zones().to_dict()))
    assert ZoneMap.load(p).to_dict() == _zones().to_dict()


# ---------------------------------------------------------------------------
# observations


def _crossing_tracks(**kw):
    tracks = scene_tracks(crossing_scene(**kw))
    return [derive_kinematics(t, 30) for t in tracks]


def test_sideswipe_slight_zone2_goods_follower():
    tracks = _crossing_tracks(angle=8.0, collide_at=4.0)
    zone = covering_zones(tracks, name="Zone 2")
    obs = build_observations(tracks, zone, sampling=SamplingConfig(stride=1))
    at = [o for o in obs if o.frame == 45]  # 1.5 s into the scene, 2.5 s before contact
    assert len(at) == 1
    o = at[0]
    follower_id = o.follower_id
    for t in tracks:
        if t.vehicle_id == follower_id:
            t.vehicle_class = "GoodsVehicle"
    o = [o for o in build_observations(tracks, zone, sampling=SamplingConfig(stride=1)) if o.frame == 45][0]
    assert o.ttc == pytest.approx(2.5, abs=1e-9)
    assert (o.family, o.outcome, o.zone) == ("Sideswipe", "Slight", "Zone 2")
    row = o.as_row()
    assert row["zone2"] == 1 and row["zone1"] == 0
    assert row["follower_class_GoodsVehicle"] == 1
    assert row["electronic_involved"] == 1


def test_congested_frames_dropped():
    slow = crossing_scene(angle=8.0, collide_at=4.0, speeds=(1.0, 1.25))
    tracks = [derive_kinematics(t, 30) for t in scene_tracks(slow)]
    zone = covering_zones(tracks)
    assert build_observations(tracks, zone) == []
    loose = CongestionFilterConfig(window_seconds=10, speed_threshold=0.5)
    assert build_observations(tracks, zone, congestion=loose)


def test_matches_oracle_enumeration():
    """Observation list equals a by-hand pass over oracle TTCs with the same sampling rule."""
    tracks = _crossing_tracks(angle=8.0, collide_at=4.0)
    a, b = tracks
    expected = []
    for w0 in range(0, len(a), 30):
        best = None
        for f in range(w0, min(len(a), w0 + 30)):
            if f < 30:
                continue  # no one-second history yet
            s1, s2 = a.state(f), b.state(f)
            if penetration_depth(s1, s2, 0.0)[0] > 1e-9:
                continue  # already overlapping
            t = oracle_ttc(s1, s2)
            if math.isfinite(t) and (best is None or t < best[1]):
                best = (f, t)
        if best is not None:
            f, t = best
            expected.append((f, "Severe" if t < 1.5 else "Slight" if t < 3.0 else "None"))
    got = [(o.frame, o.outcome) for o in build_observations(tracks, covering_zones(tracks))]
    assert got == expected
    # the first severe label sits in the window holding the first frame below 1.5 s (t = 2.5 s)
    first = next(f for f, out in got if out == "Severe")
    assert first // 30 == 75 // 30


def test_outside_study_area_dropped():
    tracks = _crossing_tracks()
    far = ZoneMap(zones=[("Zone 1", np.array([[1e4, 1e4], [1e4 + 1, 1e4], [1e4 + 1, 1e4 + 1]]))],
                  study_area=np.array([[1e4, 1e4], [1e4 + 1, 1e4], [1e4 + 1, 1e4 + 1]]))
    assert build_observations(tracks, far) == []


def _busy_scene():
    vs = [
        VehicleSpec("1", 0.0, 0.0, 0.0, 14.0, vehicle_class="Taxi", payment="Electronic"),
        VehicleSpec("2", 18.0, -3.2, 4.0, 11.0),
        VehicleSpec("3", -15.0, 0.4, 0.0, 17.0, vehicle_class="Bus", length=11.0, width=2.5),
        VehicleSpec("4", 40.0, 3.0, -3.0, 9.0, vehicle_class="Motorcycle", length=2.0, width=0.8),
        VehicleSpec("5", -30.0, -3.0, 2.0, 15.0, vehicle_class="GoodsVehicle"),
    ]
    tracks = [derive_kinematics(t, 30) for t in scene_tracks(SceneSpec(vs, n_frames=150))]
    return tracks, covering_zones(tracks)


def test_observation_invariants():
    tracks, zones = _busy_scene()
    obs = build_observations(tracks, zones, sampling=SamplingConfig(stride=10))
    assert obs
    by_id = {t.vehicle_id: t for t in tracks}
    from conflict_risk.kernel import modified_ttc

    for o in obs:
        row = o.as_row()
        assert row["zone1"] + row["zone2"] <= 1
        for role in ("leader", "follower"):
            assert sum(row[f"{role}_class_{c}"] for c in
                       ("PrivateCar", "Taxi", "GoodsVehicle", "Bus", "Motorcycle")) == 1
        lt, ft = by_id[o.leader_id], by_id[o.follower_id]
        r = modified_ttc(lt.state(lt.index(o.frame)), ft.state(ft.index(o.frame)))
        assert r.leader_id == o.leader_id
        assert r.ttc == pytest.approx(o.ttc)
        assert row["leader_avg_speed"] == lt.avg_speed_1s[lt.index(o.frame)]
    assert not any("speed" in c and "avg" not in c and "angular" not in c for c in OBS_COLUMNS)


def test_pipeline_is_byte_identical(tmp_path):
    tracks, zones = _busy_scene()
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_observations(build_observations(tracks, zones), p1)
    tracks, zones = _busy_scene()
    write_observations(build_observations(tracks, zones), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_thresholds_configurable():
    tracks = _crossing_tracks()
    zones = covering_zones(tracks)
    strict = KernelConfig(thresholds=SeverityThresholds(slight=1.0, severe=0.5))
    outs = {o.outcome for o in build_observations(tracks, zones, kernel_config=strict)}
    default = {o.outcome for o in build_observations(tracks, zones)}
    assert "None" in outs and "None" not in default


def test_group_id_canonical():
    assert group_id("v10", "v2") == group_id("v2", "v10") == "v2|v10"


# ---------------------------------------------------------------------------
# summaries


def _obs_frame(speeds, outcome="None", family="RearEnd"):
    rows = []
    for k, v in enumerate(speeds):
        row = {c: 0 for c in OBS_COLUMNS}
        row.update(group_id=f"g{k}", frame=k, family=family, outcome=outcome, ttc=2.0, zone="Zone 3",
                   leader_id="a", follower_id="b", leader_avg_speed=v, leader_class_Taxi=1,
                   follower_class_PrivateCar=1)
        rows.append(row)
    return pd.DataFrame(rows, columns=list(OBS_COLUMNS))


def test_single_observation_summary():
    s = summarize_dataset(_obs_frame([11.0]))["RearEnd"]["stats"].set_index("variable")
    assert s.loc["leader_avg_speed", "mean"] == 11.0
    assert s.loc["leader_avg_speed", "sd"] == 0.0


def test_two_point_sample_sd():
    s = summarize_dataset(_obs_frame([10.0, 14.0]))["RearEnd"]["stats"].set_index("variable")
    assert s.loc["leader_avg_speed", "mean"] == 12.0
    assert s.loc["leader_avg_speed", "sd"] == pytest.approx(math.sqrt(8))
    assert s.loc["zone3", "mean"] == 1.0


def test_count_format_and_layout():
    assert format_count(2726, 3535) == "2726 (77.1%)"
    text = format_summary(summarize_dataset(_obs_frame([10.0, 14.0, 12.0])))
    assert "No conflict" in text and "3 (100.0%)" in text and "Total observations" in text


def test_empty_summary_rejected():
    with pytest.raises(EmptyData):
        summarize_dataset(observations_frame([]))


def test_read_observations_keeps_none_outcome(tmp_path):
    from conflict_risk.trajectory import OBS_COLUMNS, read_observations

    frame = pd.DataFrame({c: [0, 0] for c in OBS_COLUMNS})
    frame["outcome"] = ["None", "Severe"]
    frame["ttc"] = [np.inf, 1.0]
    frame.to_csv(tmp_path / "obs.csv", index=False)
    back = read_observations(tmp_path / "obs.csv")
    assert list(back["outcome"]) == ["None", "Severe"]
    assert np.isinf(back["ttc"].iloc[0])
