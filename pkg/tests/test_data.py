"""Ingestion: DICOM subset, contour files, rasterization, phantoms,
patient splits and the on-disk sample format."""

import json
import struct

import numpy as np
import pytest

from lvseg.data import (
    CineSample,
    DicomFormatError,
    DicomMagicError,
    DicomMissingTagError,
    DicomTruncatedError,
    DicomUnsupportedError,
    DicomValueError,
    _synth_one,
    load_dataset,
    load_sample,
    parse_contour,
    rasterize,
    read_dicom,
    save_sample,
    serialize_contour,
    split_patients,
    synth_phantom,
)
from lvseg.metrics import ContourPolyline, dice, extract_contour

# ---------------------------------------------------------------------------
# minimal DICOM writer, just enough to exercise the reader

_LONG_VRS = (b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN")


def element(tag, vr: bytes, value: bytes, explicit: bool) -> bytes:
    head = struct.pack("<HH", *tag)
    if explicit:
        if vr in _LONG_VRS:
            return head + vr + b"\x00\x00" + struct.pack("<I", len(value)) + value
        return head + vr + struct.pack("<H", len(value)) + value
    return head + struct.pack("<I", len(value)) + value


def ds(text: str) -> bytes:
    raw = text.encode("ascii")
    return raw + b" " if len(raw) % 2 else raw


def build_dicom(pixels, spacing=(1.5, 1.2), transfer="explicit", meta=True,
                slope=None, intercept=None, drop=(), pixel_bytes=None):
    """Assemble a single-frame file. transfer picks the syntax UID (or a
    verbatim string for unsupported ones); meta=False omits the whole
    0002 group so the reader must sniff."""
    px = np.asarray(pixels)
    bits = px.dtype.itemsize * 8
    signed = int(px.dtype in (np.int8, np.int16))
    uid = {"explicit": "1.2.840.10008.1.2.1", "implicit": "1.2.840.10008.1.2"}.get(
        transfer, transfer)
    explicit = uid == "1.2.840.10008.1.2.1"
    parts = [b"\x00" * 128, b"DICM"]
    if meta:
        parts.append(element((0x0002, 0x0010), b"UI", ds(uid), explicit=True))
    body = {
        (0x0028, 0x0010): (b"US", struct.pack("<H", px.shape[0])),
        (0x0028, 0x0011): (b"US", struct.pack("<H", px.shape[1])),
        (0x0028, 0x0030): (b"DS", ds(f"{spacing[0]}\\{spacing[1]}")),
        (0x0028, 0x0100): (b"US", struct.pack("<H", bits)),
        (0x0028, 0x0103): (b"US", struct.pack("<H", signed)),
        (0x7FE0, 0x0010): (b"OW", px.astype(px.dtype.newbyteorder("<")).tobytes()
                           if pixel_bytes is None else pixel_bytes),
    }
    if intercept is not None:
        body[(0x0028, 0x1052)] = (b"DS", ds(str(intercept)))
    if slope is not None:
        body[(0x0028, 0x1053)] = (b"DS", ds(str(slope)))
    for tag in sorted(body):
        if tag in drop:
            continue
        vr, value = body[tag]
        parts.append(element(tag, vr, value, explicit))
    return b"".join(parts)


def pixels16(seed=0, shape=(7, 9)):
    return np.random.default_rng(seed).integers(0, 4096, shape).astype(np.uint16)


class TestDicomReader:
    @pytest.mark.parametrize("transfer", ["explicit", "implicit"])
    @pytest.mark.parametrize("meta", [True, False])
    def test_round_trip_u16(self, transfer, meta):
        px = pixels16()
        img, spacing = read_dicom(build_dicom(px, transfer=transfer, meta=meta))
        assert np.array_equal(img, px.astype(np.float64))
        assert spacing == (1.5, 1.2)  # (row pitch, col pitch), file order

    def test_round_trip_u8(self):
        px = np.arange(30, dtype=np.uint8).reshape(5, 6)
        img, _ = read_dicom(build_dicom(px))
        assert np.array_equal(img, px.astype(np.float64))

    def test_signed_pixels_with_rescale(self):
        px = np.array([[-100, 0], [50, -3]], dtype=np.int16)
        img, _ = read_dicom(build_dicom(px, slope=2.0, intercept=-10.0))
        assert np.array_equal(img, px.astype(np.float64) * 2.0 - 10.0)

    def test_extra_bytes_after_pixeldata_length_ignored(self):
        px = pixels16()
        raw = px.tobytes() + b"\x00\x00"  # trailing pad inside the element
        img, _ = read_dicom(build_dicom(px, pixel_bytes=raw))
        assert np.array_equal(img, px.astype(np.float64))

    def test_magic_errors(self):
        with pytest.raises(DicomMagicError, match="preamble"):
            read_dicom(b"short")
        blob = bytearray(build_dicom(pixels16()))
        blob[128:132] = b"JUNK"
        with pytest.raises(DicomMagicError, match="DICM"):
            read_dicom(bytes(blob))

    def test_unsupported_transfer_syntax(self):
        blob = build_dicom(pixels16(), transfer="1.2.840.10008.1.2.2")
        with pytest.raises(DicomUnsupportedError, match="transfer syntax"):
            read_dicom(blob)

    def test_undefined_length_rejected(self):
        blob = build_dicom(pixels16())
        pd = struct.pack("<HH", 0x7FE0, 0x0010) + b"OW\x00\x00"
        i = blob.index(pd)
        broken = blob[:i + 8] + b"\xff\xff\xff\xff" + blob[i + 12:]
        with pytest.raises(DicomUnsupportedError, match="undefined-length"):
            read_dicom(broken)

    @pytest.mark.parametrize("tag,name", [
        ((0x0028, 0x0010), "Rows"),
        ((0x0028, 0x0011), "Columns"),
        ((0x0028, 0x0030), "PixelSpacing"),
        ((0x0028, 0x0100), "BitsAllocated"),
        ((0x7FE0, 0x0010), "PixelData"),
    ])
    def test_missing_required_tag(self, tag, name):
        blob = build_dicom(pixels16(), drop=(tag,))
        with pytest.raises(DicomMissingTagError, match=name):
            read_dicom(blob)

    def test_value_errors(self):
        base = build_dicom(pixels16())

        def with_spacing(text):
            good = element((0x0028, 0x0030), b"DS", ds("1.5\\1.2"), True)
            bad = element((0x0028, 0x0030), b"DS", ds(text), True)
            return base.replace(good, bad)

        with pytest.raises(DicomValueError, match="bad decimal"):
            read_dicom(with_spacing("abc\\1.2"))
        with pytest.raises(DicomValueError, match="expected 2 values"):
            read_dicom(with_spacing("1.5\\1.2\\9.0"))
        with pytest.raises(DicomValueError, match="non-positive"):
            read_dicom(with_spacing("-1.\\1.2"))

    def test_degenerate_size(self):
        px = pixels16()
        blob = build_dicom(px)
        rows = element((0x0028, 0x0010), b"US", struct.pack("<H", px.shape[0]), True)
        zero = element((0x0028, 0x0010), b"US", struct.pack("<H", 0), True)
        with pytest.raises(DicomValueError, match="degenerate"):
            read_dicom(blob.replace(rows, zero))

    def test_unsupported_bit_depth(self):
        px = pixels16()
        blob = build_dicom(px)
        bits16 = element((0x0028, 0x0100), b"US", struct.pack("<H", 16), True)
        bits32 = element((0x0028, 0x0100), b"US", struct.pack("<H", 32), True)
        with pytest.raises(DicomUnsupportedError, match="BitsAllocated"):
            read_dicom(blob.replace(bits16, bits32))

    def test_short_pixel_data(self):
        px = pixels16()
        blob = build_dicom(px, pixel_bytes=px.tobytes()[:-4])
        with pytest.raises(DicomTruncatedError, match="PixelData"):
            read_dicom(blob)

    def test_truncation_mid_element_reports_offset(self):
        blob = build_dicom(pixels16())
        with pytest.raises(DicomTruncatedError, match="offset"):
            read_dicom(blob[:140])

    def test_bad_vr_in_explicit_stream(self):
        blob = build_dicom(pixels16())
        rows = element((0x0028, 0x0010), b"US", struct.pack("<H", 7), True)
        i = blob.index(rows)
        broken = blob[:i + 4] + b"\x07\x07" + blob[i + 6:]
        with pytest.raises(DicomValueError, match="bad VR"):
            read_dicom(broken)

    def test_fuzz_never_crashes(self):
        base = build_dicom(pixels16(3, (9, 11)))
        rng = np.random.default_rng(2024)
        outcomes = {"ok": 0, "rejected": 0}
        for _ in range(1000):
            blob = bytearray(base)
            kind = rng.integers(0, 5)
            if kind == 0:  # truncate
                blob = blob[:rng.integers(0, len(blob))]
            elif kind == 1:  # flip a few bytes
                for _ in range(int(rng.integers(1, 9))):
                    blob[rng.integers(0, len(blob))] = int(rng.integers(0, 256))
            elif kind == 2:  # inflate a dword, likely a length field
                pos = int(rng.integers(132, len(blob) - 4))
                blob[pos:pos + 4] = b"\xff\xff\xff\xfe"
            elif kind == 3:  # splice random garbage
                pos = int(rng.integers(0, len(blob)))
                junk = bytes(rng.integers(0, 256, int(rng.integers(1, 40))).tolist())
                blob = blob[:pos] + junk + blob[pos:]
            else:  # stomp the header region
                pos = int(rng.integers(0, 140))
                blob[pos:pos + 8] = bytes(rng.integers(0, 256, 8).tolist())
            try:
                read_dicom(bytes(blob))
                outcomes["ok"] += 1
            except DicomFormatError:
                outcomes["rejected"] += 1
            # anything else propagates and fails the test
        assert outcomes["rejected"] > 500  # mutations mostly do real damage


class TestContourFiles:
    def test_round_trip_exact(self):
        pts = np.array([[0.1234567890123, 4.5], [7.25, 8.5], [1.0, 2.0]])
        poly = ContourPolyline(pts)
        again = parse_contour(serialize_contour(poly))
        assert np.array_equal(again.points, pts)
        assert again.closed

    def test_parse_tolerates_blank_lines(self):
        poly = parse_contour("1 2\n\n3 4\n  \n5 6\n")
        assert poly.points.shape == (3, 2)

    def test_parse_errors(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_contour("1 2\n3 4 5\n6 7\n")
        with pytest.raises(ValueError, match="not a number"):
            parse_contour("1 2\n3 x\n5 6\n")
        with pytest.raises(ValueError, match="degenerate"):
            parse_contour("1 2\n3 4\n")


class TestRasterize:
    def test_axis_aligned_square_includes_boundary(self):
        sq = ContourPolyline(np.array([[0, 0], [4, 0], [4, 4], [0, 4]], dtype=float))
        m = rasterize(sq, (6, 6))
        assert m.sum() == 25
        assert m[:5, :5].all() and not m[5].any() and not m[:, 5].any()

    def test_even_odd_rule_leaves_star_center_empty(self):
        ang = -np.pi / 2 + np.arange(5) * (4 * np.pi / 5)
        pts = np.stack([12 + 10 * np.cos(ang), 12 + 10 * np.sin(ang)], axis=1)
        m = rasterize(ContourPolyline(pts), (25, 25))
        assert m[12, 12] == 0  # crossed twice -> outside
        assert m[2, 12] == 1  # tip vertex, on the boundary
        assert m[4, 12] == 1  # inside the top arm

    def test_matches_extraction(self):
        ys, xs = np.mgrid[0:18, 0:18]
        disk = (((xs - 8.0) ** 2 + (ys - 8.5) ** 2) <= 25.0).astype(np.uint8)
        assert dice(rasterize(extract_contour(disk), disk.shape), disk) == 1.0


class TestSample:
    def test_validation(self):
        img = np.zeros((4, 4))
        with pytest.raises(ValueError, match="2-D"):
            CineSample(np.zeros(4), np.zeros(4), (1, 1), "c", "s")
        with pytest.raises(ValueError, match="mask shape"):
            CineSample(img, np.zeros((3, 4)), (1, 1), "c", "s")
        with pytest.raises(ValueError, match="binary"):
            CineSample(img, np.full((4, 4), 7), (1, 1), "c", "s")
        with pytest.raises(ValueError, match="positive"):
            CineSample(img, np.zeros((4, 4)), (0, 1), "c", "s")

    def test_implausible_spacing_warns(self):
        with pytest.warns(UserWarning, match="plausible"):
            CineSample(np.zeros((4, 4)), np.zeros((4, 4)), (55.0, 1.0), "c", "s")


class TestSplit:
    def test_even_three_way(self):
        ids = [f"p{i}" for i in range(45)]
        tr, va, te = split_patients(ids, (1, 1, 1), seed=7)
        assert (len(tr), len(va), len(te)) == (15, 15, 15)
        assert sorted(tr + va + te) == sorted(ids)

    def test_small_uneven(self):
        tr, va, te = split_patients(["a", "b", "c", "d"], (2, 1, 1), seed=0)
        assert (len(tr), len(va), len(te)) == (2, 1, 1)

    def test_leftover_goes_to_train_first(self):
        tr, va, te = split_patients([f"p{i}" for i in range(47)], (1, 1, 1), seed=1)
        assert (len(tr), len(va), len(te)) == (16, 16, 15)

    def test_deterministic_and_order_independent(self):
        ids = [f"p{i}" for i in range(20)]
        first = split_patients(ids, (4, 1, 1), seed=3)
        again = split_patients(list(reversed(ids)), (4, 1, 1), seed=3)
        assert first == again
        assert split_patients(ids, (4, 1, 1), seed=4) != first

    def test_zero_ratio_part_is_empty(self):
        tr, va, te = split_patients(["a", "b", "c", "d"], (1, 0, 1), seed=0)
        assert va == [] and len(tr) + len(te) == 4

    def test_errors(self):
        with pytest.raises(ValueError, match="duplicate"):
            split_patients(["a", "a", "b"])
        with pytest.raises(ValueError, match="cannot fill"):
            split_patients(["a", "b"], (1, 1, 1))
        with pytest.raises(ValueError, match="ratio"):
            split_patients(["a", "b", "c"], (0, 0, 0))


class TestPhantom:
    def test_determinism_and_identity(self):
        a = synth_phantom(5, size=32, seed=9)
        b = synth_phantom(5, size=32, seed=9)
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
        assert len({s.case_id for s in a}) == 5
        c = synth_phantom(5, size=32, seed=10)
        assert not np.array_equal(a[0].image, c[0].image)

    def test_image_range_and_mask(self):
        for s in synth_phantom(6, size=48, seed=2):
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.mask.any(), "phantom cavity must be visible"
            assert s.image.shape == (48, 48)

    def test_mask_area_matches_ellipse_geometry(self):
        # lattice-point count of an ellipse differs from pi*a*b by at
        # most ~its perimeter; 0.5x Ramanujan leaves real margin
        # (worst observed over hundreds of draws is ~0.15x)
        for i in range(50):
            rng = np.random.default_rng(4000 + i)
            s, geo = _synth_one(64, rng, "t")
            a, b = geo["a"], geo["b"]
            target = np.pi * a * b
            perimeter = np.pi * (3 * (a + b) - np.sqrt((3 * a + b) * (a + 3 * b)))
            assert abs(s.mask.sum() - target) <= 0.5 * perimeter

    def test_validation(self):
        with pytest.raises(ValueError, match="size"):
            synth_phantom(3, size=16)
        with pytest.raises(ValueError, match="count"):
            synth_phantom(0)


class TestDiskFormat:
    def sample(self, with_contour=True):
        rng = np.random.default_rng(1)
        img = rng.uniform(-3.0, 7.0, (10, 12))
        mask = (rng.random((10, 12)) > 0.7).astype(np.uint8)
        contour = ContourPolyline(np.array([[1.5, 2.0], [5.0, 2.5], [3.25, 6.0]]))
        return CineSample(img, mask, (1.25, 1.75), "caseA", "007",
                          truth_contour=contour if with_contour else None)

    def test_round_trip(self, tmp_path):
        s = self.sample()
        stem = save_sample(tmp_path, s)
        assert stem == "caseA-007"
        back = load_sample(tmp_path, stem)
        lo, hi = s.image.min(), s.image.max()
        normalized = (s.image - lo) / (hi - lo)
        assert np.abs(back.image - normalized).max() <= 1.0 / 65535
        assert np.array_equal(back.mask, s.mask)
        assert back.spacing_mm == s.spacing_mm
        assert (back.case_id, back.slice_id) == ("caseA", "007")
        assert np.array_equal(back.truth_contour.points, s.truth_contour.points)

    def test_sidecar_spacing_is_row_first(self, tmp_path):
        save_sample(tmp_path, self.sample(with_contour=False))
        sidecar = json.loads((tmp_path / "caseA-007.json").read_text())
        assert sidecar["spacing_mm"] == [1.75, 1.25]  # [sy, sx] on disk

    def test_contour_file_optional(self, tmp_path):
        save_sample(tmp_path, self.sample(with_contour=False))
        assert not (tmp_path / "caseA-007.contour.txt").exists()
        assert load_sample(tmp_path, "caseA-007").truth_contour is None

    def test_load_errors(self, tmp_path):
        s = self.sample(with_contour=False)
        stem = save_sample(tmp_path, s)
        raw = tmp_path / f"{stem}.raw"
        raw.write_bytes(raw.read_bytes()[:-2])
        with pytest.raises(ValueError, match="bytes"):
            load_sample(tmp_path, stem)
        (tmp_path / f"{stem}.json").write_text("{broken")
        with pytest.raises(ValueError, match="JSON"):
            load_sample(tmp_path, stem)

    def test_unsafe_ids_rejected(self, tmp_path):
        s = self.sample(with_contour=False)
        s.case_id = "../evil"
        with pytest.raises(ValueError, match="filesystem-safe"):
            save_sample(tmp_path, s)

    def test_load_dataset_sorted(self, tmp_path):
        for cid in ("b", "a", "c"):
            save_sample(tmp_path, CineSample(
                np.zeros((4, 4)), np.zeros((4, 4), dtype=np.uint8),
                (1.0, 1.0), cid, "000"))
        assert [s.case_id for s in load_dataset(tmp_path)] == ["a", "b", "c"]
        with pytest.raises(ValueError, match="no canonical samples"):
            load_dataset(tmp_path / "nowhere")
