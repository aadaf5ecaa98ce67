// SPDX-License-Identifier: MIT
#pragma once

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "voxelage/common.hpp"
#include "voxelage/volume.hpp"

namespace voxelage {

// NIfTI-1 single-file I/O (.nii and .nii.gz). Header fields honored:
// sizeof_hdr, dim, datatype, pixdim, scl_slope/scl_inter, sform/qform.
// Written files are always float32 with sform_code = 1.

namespace nifti_detail {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;     // must be 348
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max;
    float cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4];
    float srow_y[4];
    float srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

enum NiftiDatatype : int16_t {
    DT_UINT8 = 2,
    DT_INT16 = 4,
    DT_INT32 = 8,
    DT_FLOAT32 = 16,
    DT_FLOAT64 = 64,
};

template <class T>
inline T byteswap(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
}

inline void swap_header(Nifti1Header& h) {
    h.sizeof_hdr = byteswap(h.sizeof_hdr);
    for (auto& d : h.dim) d = byteswap(d);
    h.intent_p1 = byteswap(h.intent_p1);
    h.intent_p2 = byteswap(h.intent_p2);
    h.intent_p3 = byteswap(h.intent_p3);
    h.intent_code = byteswap(h.intent_code);
    h.datatype = byteswap(h.datatype);
    h.bitpix = byteswap(h.bitpix);
    h.slice_start = byteswap(h.slice_start);
    for (auto& p : h.pixdim) p = byteswap(p);
    h.vox_offset = byteswap(h.vox_offset);
    h.scl_slope = byteswap(h.scl_slope);
    h.scl_inter = byteswap(h.scl_inter);
    h.slice_end = byteswap(h.slice_end);
    h.cal_max = byteswap(h.cal_max);
    h.cal_min = byteswap(h.cal_min);
    h.slice_duration = byteswap(h.slice_duration);
    h.toffset = byteswap(h.toffset);
    h.glmax = byteswap(h.glmax);
    h.glmin = byteswap(h.glmin);
    h.qform_code = byteswap(h.qform_code);
    h.sform_code = byteswap(h.sform_code);
    h.quatern_b = byteswap(h.quatern_b);
    h.quatern_c = byteswap(h.quatern_c);
    h.quatern_d = byteswap(h.quatern_d);
    h.qoffset_x = byteswap(h.qoffset_x);
    h.qoffset_y = byteswap(h.qoffset_y);
    h.qoffset_z = byteswap(h.qoffset_z);
    for (auto& s : h.srow_x) s = byteswap(s);
    for (auto& s : h.srow_y) s = byteswap(s);
    for (auto& s : h.srow_z) s = byteswap(s);
}

inline Affine affine_from_quaternion(const Nifti1Header& h) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double a2 = 1.0 - b * b - c * c - d * d;
    const double a = a2 > 0 ? std::sqrt(a2) : 0.0;
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    const double sx = h.pixdim[1], sy = h.pixdim[2], sz = h.pixdim[3] * qfac;
    Affine m = identity_affine();
    m[0] = (a * a + b * b - c * c - d * d) * sx;
    m[1] = (2 * b * c - 2 * a * d) * sy;
    m[2] = (2 * b * d + 2 * a * c) * sz;
    m[3] = h.qoffset_x;
    m[4] = (2 * b * c + 2 * a * d) * sx;
    m[5] = (a * a + c * c - b * b - d * d) * sy;
    m[6] = (2 * c * d - 2 * a * b) * sz;
    m[7] = h.qoffset_y;
    m[8] = (2 * b * d - 2 * a * c) * sx;
    m[9] = (2 * c * d + 2 * a * b) * sy;
    m[10] = (a * a + d * d - b * b - c * c) * sz;
    m[11] = h.qoffset_z;
    return m;
}

// Reads the whole file through zlib so plain and gzip streams share a path
// (gzread passes uncompressed data through transparently).
inline std::vector<unsigned char> read_all_bytes(const std::string& path) {
    if (!std::filesystem::exists(path)) throw IoError("file not found: " + path);
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw IoError("cannot open: " + path);
    std::vector<unsigned char> bytes;
    unsigned char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
    const bool bad = n < 0;
    gzclose(f);
    if (bad) throw IoError("read failure: " + path);
    return bytes;
}

template <class Raw>
inline void decode_payload(const unsigned char* src, int64_t count, bool swap, double slope,
                           double inter, std::vector<float>& dst) {
    dst.resize(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        Raw r;
        std::memcpy(&r, src + i * sizeof(Raw), sizeof(Raw));
        if (swap) r = byteswap(r);
        dst[static_cast<size_t>(i)] = static_cast<float>(slope * static_cast<double>(r) + inter);
    }
}

}  // namespace nifti_detail

inline Volume3D read_nifti(const std::string& path) {
    using namespace nifti_detail;
    const auto bytes = read_all_bytes(path);
    if (bytes.size() < sizeof(Nifti1Header)) throw FormatError("truncated NIfTI header: " + path);

    Nifti1Header h;
    std::memcpy(&h, bytes.data(), sizeof(h));
    bool swap = false;
    if (h.sizeof_hdr != 348) {
        if (byteswap(h.sizeof_hdr) == 348) {
            swap = true;
            swap_header(h);
        } else {
            throw FormatError("not a NIfTI-1 file (sizeof_hdr != 348): " + path);
        }
    }
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        throw FormatError("bad NIfTI magic: " + path);
    if (std::strncmp(h.magic, "ni1", 3) == 0)
        throw UnsupportedError("two-file (.hdr/.img) NIfTI is not supported: " + path);

    if (h.dim[0] < 3 || h.dim[0] > 7) throw FormatError("expected a 3D NIfTI image: " + path);
    for (int d = 4; d <= h.dim[0]; ++d)
        if (h.dim[d] > 1) throw UnsupportedError("4D+ NIfTI images are not supported: " + path);
    const int64_t nx = h.dim[1], ny = h.dim[2], nz = h.dim[3];
    if (nx <= 0 || ny <= 0 || nz <= 0) throw FormatError("non-positive dimensions: " + path);

    double slope = h.scl_slope, inter = h.scl_inter;
    if (slope == 0.0) {
        slope = 1.0;
        inter = 0.0;
    }

    const int64_t offset = static_cast<int64_t>(h.vox_offset);
    const int64_t count = nx * ny * nz;
    const int bpp = h.bitpix / 8;
    if (offset < static_cast<int64_t>(sizeof(Nifti1Header)) ||
        static_cast<int64_t>(bytes.size()) < offset + count * bpp)
        throw FormatError("truncated NIfTI payload: " + path);
    const unsigned char* src = bytes.data() + offset;

    // file order: x fastest; internal C-order: axis2 (= z here) fastest
    std::vector<float> file_vals;
    switch (h.datatype) {
        case DT_UINT8: decode_payload<uint8_t>(src, count, false, slope, inter, file_vals); break;
        case DT_INT16: decode_payload<int16_t>(src, count, swap, slope, inter, file_vals); break;
        case DT_INT32: decode_payload<int32_t>(src, count, swap, slope, inter, file_vals); break;
        case DT_FLOAT32: decode_payload<float>(src, count, swap, slope, inter, file_vals); break;
        case DT_FLOAT64: decode_payload<double>(src, count, swap, slope, inter, file_vals); break;
        default:
            throw UnsupportedError("unsupported NIfTI datatype " + std::to_string(h.datatype) +
                                   ": " + path);
    }

    Volume3D vol({nx, ny, nz});
    for (int64_t k = 0; k < nz; ++k)
        for (int64_t j = 0; j < ny; ++j)
            for (int64_t i = 0; i < nx; ++i)
                vol.at(i, j, k) = file_vals[static_cast<size_t>(i + nx * (j + ny * k))];

    for (float v : vol.data)
        if (!std::isfinite(v)) throw ValidationError("NIfTI volume contains NaN/Inf: " + path);

    if (h.sform_code > 0) {
        for (int j = 0; j < 4; ++j) {
            vol.affine[0 + j] = h.srow_x[j];
            vol.affine[4 + j] = h.srow_y[j];
            vol.affine[8 + j] = h.srow_z[j];
        }
    } else if (h.qform_code > 0) {
        vol.affine = affine_from_quaternion(h);
    } else {
        vol.affine = identity_affine();
        vol.affine[0] = h.pixdim[1];
        vol.affine[5] = h.pixdim[2];
        vol.affine[10] = h.pixdim[3];
    }
    vol.validate("NIfTI volume");
    return vol;
}

inline void write_nifti(const Volume3D& vol, const std::string& path) {
    using namespace nifti_detail;
    vol.validate("volume to write");
    for (float v : vol.data)
        if (!std::isfinite(v)) throw ValidationError("refusing to write NaN/Inf voxels: " + path);

    Nifti1Header h;
    std::memset(&h, 0, sizeof(h));
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(vol.shape[0]);
    h.dim[2] = static_cast<int16_t>(vol.shape[1]);
    h.dim[3] = static_cast<int16_t>(vol.shape[2]);
    for (int d = 4; d < 8; ++d) h.dim[d] = 1;
    h.datatype = DT_FLOAT32;
    h.bitpix = 32;
    const auto sp = vol.spacing();
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(sp[0]);
    h.pixdim[2] = static_cast<float>(sp[1]);
    h.pixdim[3] = static_cast<float>(sp[2]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.sform_code = 1;
    h.qform_code = 0;
    for (int j = 0; j < 4; ++j) {
        h.srow_x[j] = static_cast<float>(vol.affine[0 + j]);
        h.srow_y[j] = static_cast<float>(vol.affine[4 + j]);
        h.srow_z[j] = static_cast<float>(vol.affine[8 + j]);
    }
    std::strncpy(h.descrip, "voxelage", sizeof(h.descrip) - 1);
    std::memcpy(h.magic, "n+1", 4);

    const int64_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2];
    std::vector<float> payload(static_cast<size_t>(vol.numel()));
    for (int64_t k = 0; k < nz; ++k)
        for (int64_t j = 0; j < ny; ++j)
            for (int64_t i = 0; i < nx; ++i)
                payload[static_cast<size_t>(i + nx * (j + ny * k))] = vol.at(i, j, k);

    const char extension[4] = {0, 0, 0, 0};
    const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    if (gz) {
        gzFile f = gzopen(path.c_str(), "wb");
        if (!f) throw IoError("cannot open for writing: " + path);
        bool ok = gzwrite(f, &h, sizeof(h)) == static_cast<int>(sizeof(h)) &&
                  gzwrite(f, extension, 4) == 4 &&
                  gzwrite(f, payload.data(), static_cast<unsigned>(payload.size() * 4)) ==
                      static_cast<int>(payload.size() * 4);
        ok = gzclose(f) == Z_OK && ok;
        if (!ok) throw IoError("write failure: " + path);
    } else {
        std::FILE* f = std::fopen(path.c_str(), "wb");
        if (!f) throw IoError("cannot open for writing: " + path);
        bool ok = std::fwrite(&h, 1, sizeof(h), f) == sizeof(h) &&
                  std::fwrite(extension, 1, 4, f) == 4 &&
                  std::fwrite(payload.data(), 4, payload.size(), f) == payload.size();
        ok = std::fclose(f) == 0 && ok;
        if (!ok) throw IoError("write failure: " + path);
    }
}

}  // namespace voxelage
