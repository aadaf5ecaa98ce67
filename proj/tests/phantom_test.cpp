// SPDX-License-Identifier: MIT
#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "voxelage/phantom.hpp"

using namespace voxelage;

namespace {

int64_t ventricle_voxels(const Subject& s, const PhantomSpec& spec, double age) {
    // recount by the geometric definition: CSF voxels within the central
    // sphere radius
    const double rv = spec.ventricle_base_radius + spec.ventricle_growth_k * age;
    const double c = (static_cast<double>(spec.size) - 1.0) / 2.0;
    int64_t count = 0;
    for (int64_t a = 0; a < spec.size; ++a)
        for (int64_t b = 0; b < spec.size; ++b)
            for (int64_t d = 0; d < spec.size; ++d) {
                const double rc = std::sqrt((a - c) * (a - c) + (b - c) * (b - c) + (d - c) * (d - c));
                if (rc <= rv && s.tissue_labels.at(a, b, d) == kCsf) ++count;
            }
    return count;
}

}  // namespace

TEST(Phantom, DeterministicForSeedAndAge) {
    PhantomSpec spec;
    spec.seed = 42;
    const Subject a = generate_phantom(spec, 55.5, "a");
    const Subject b = generate_phantom(spec, 55.5, "b");
    EXPECT_EQ(a.image.data, b.image.data);
    EXPECT_EQ(a.tissue_labels.data, b.tissue_labels.data);
    EXPECT_EQ(a.voxel_age.data, b.voxel_age.data);
}

TEST(Phantom, VentricleGrowsWithAge) {
    PhantomSpec spec;
    spec.seed = 1;
    const Subject young = generate_phantom(spec, 30.0, "y");
    const Subject old = generate_phantom(spec, 80.0, "o");
    EXPECT_GT(ventricle_voxels(old, spec, 80.0), ventricle_voxels(young, spec, 30.0));
}

TEST(Phantom, NoiselessGmIntensityExact) {
    PhantomSpec spec;
    spec.noise_sigma = 0.0;
    const Subject s = generate_phantom(spec, 50.0, "s");
    bool saw_gm = false;
    for (int64_t i = 0; i < s.image.numel(); ++i)
        if (s.tissue_labels.data[static_cast<size_t>(i)] == kGrayMatter) {
            saw_gm = true;
            EXPECT_FLOAT_EQ(s.image.data[static_cast<size_t>(i)], 0.45f);
        }
    EXPECT_TRUE(saw_gm);
}

TEST(Phantom, TissueLabelsPartitionBrainMask) {
    PhantomSpec spec;
    spec.seed = 3;
    const Subject s = generate_phantom(spec, 63.0, "s");
    int64_t brain = 0, gm = 0, wm = 0, csf = 0;
    for (int64_t i = 0; i < s.image.numel(); ++i) {
        brain += s.brain_mask.data[static_cast<size_t>(i)] != 0;
        const auto label = s.tissue_labels.data[static_cast<size_t>(i)];
        gm += label == kGrayMatter;
        wm += label == kWhiteMatter;
        csf += label == kCsf;
    }
    EXPECT_GT(gm, 0);
    EXPECT_GT(wm, 0);
    EXPECT_GT(csf, 0);
    EXPECT_EQ(gm + wm + csf, brain);
    EXPECT_NO_THROW(s.validate());
}

TEST(Phantom, VentricleMonotoneInAge) {
    PhantomSpec spec;
    spec.seed = 8;
    int64_t prev = -1;
    for (double age : {30.0, 40.0, 50.0, 60.0, 70.0, 80.0}) {
        const Subject s = generate_phantom(spec, age, "s");
        const int64_t count = ventricle_voxels(s, spec, age);
        EXPECT_GE(count, prev);
        prev = count;
    }
}

TEST(Phantom, RegionalOffsetExactInOctant) {
    PhantomSpec spec;
    spec.seed = 4;
    spec.regional_offset = RegionalOffset{7, 5.0};  // upper half along all axes
    const double age = 52.0;
    const Subject s = generate_phantom(spec, age, "s");
    const int64_t half = spec.size / 2;
    for (int64_t a = 0; a < spec.size; ++a)
        for (int64_t b = 0; b < spec.size; ++b)
            for (int64_t c = 0; c < spec.size; ++c) {
                if (!s.brain_mask.at(a, b, c)) continue;
                const bool inside = a >= half && b >= half && c >= half;
                const double expected = inside ? age + 5.0 : age;
                EXPECT_DOUBLE_EQ(s.voxel_age.at(a, b, c), expected);
            }
}

TEST(Phantom, AgeOutsideRangeRejected) {
    PhantomSpec spec;
    EXPECT_THROW(generate_phantom(spec, 20.0, "s"), ValidationError);
    EXPECT_THROW(generate_phantom(spec, 90.0, "s"), ValidationError);
}

TEST(Phantom, InvalidSpecRejected) {
    PhantomSpec spec;
    spec.size = 8;
    EXPECT_THROW(spec.validate(), ValidationError);
    spec = PhantomSpec{};
    spec.age_range = {80.0, 30.0};
    EXPECT_THROW(spec.validate(), ValidationError);
}

TEST(Cohort, DeterministicManifestAndAges) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 7;
    const auto cohort_a = generate_cohort(spec, 20);
    const auto cohort_b = generate_cohort(spec, 20);
    ASSERT_EQ(cohort_a.size(), 20u);
    for (size_t i = 0; i < cohort_a.size(); ++i) {
        EXPECT_EQ(cohort_a[i].chronological_age, cohort_b[i].chronological_age);
        EXPECT_EQ(cohort_a[i].image.data, cohort_b[i].image.data);
    }

    TempDir dir_a("cohort_a"), dir_b("cohort_b");
    write_cohort(cohort_a, dir_a.path);
    write_cohort(cohort_b, dir_b.path);
    std::ifstream fa(dir_a.str("manifest.csv")), fb(dir_b.str("manifest.csv"));
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
}

TEST(Cohort, EmpiricalAgeMeanInBounds) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 7;
    const auto cohort = generate_cohort(spec, 200);
    double mean = 0;
    for (const auto& s : cohort) {
        EXPECT_GE(s.chronological_age, 30.0);
        EXPECT_LE(s.chronological_age, 80.0);
        mean += s.chronological_age;
    }
    mean /= 200.0;
    EXPECT_GE(mean, 52.0);
    EXPECT_LE(mean, 58.0);
}

TEST(Cohort, SingleSubjectManifest) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 2;
    const auto cohort = generate_cohort(spec, 1);
    ASSERT_EQ(cohort.size(), 1u);
    TempDir dir("cohort1");
    write_cohort(cohort, dir.path);
    std::ifstream f(dir.str("manifest.csv"));
    std::string line;
    int rows = 0;
    while (std::getline(f, line))
        if (!line.empty()) ++rows;
    EXPECT_EQ(rows, 2);  // header + one row
}

TEST(Cohort, RoundTripThroughDisk) {
    PhantomSpec spec;
    spec.size = 16;
    spec.seed = 21;
    spec.regional_offset = RegionalOffset{3, 4.0};
    const auto cohort = generate_cohort(spec, 3);
    TempDir dir("cohort_rt");
    write_cohort(cohort, dir.path);
    const auto back = read_cohort(dir.path);
    ASSERT_EQ(back.size(), cohort.size());
    for (size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].subject_id, cohort[i].subject_id);
        EXPECT_NEAR(back[i].chronological_age, cohort[i].chronological_age, 1e-6);
        EXPECT_EQ(back[i].image.data, cohort[i].image.data);
        EXPECT_EQ(back[i].brain_mask.data, cohort[i].brain_mask.data);
        EXPECT_EQ(back[i].tissue_labels.data, cohort[i].tissue_labels.data);
        EXPECT_EQ(back[i].voxel_age.data, cohort[i].voxel_age.data);
    }
}
