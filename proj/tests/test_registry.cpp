#include <doctest.h>

#include <random>
#include <sstream>

#include "shmkit/log.hpp"
#include "shmkit/registry.hpp"

#include <sys/wait.h>
#include "support/common.hpp"
#include "support/process.hpp"

using namespace shmkit;

namespace {

ErrorCode code_of(auto&& fn)
{
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::OutOfMemory; // sentinel: nothing thrown
}

std::uint64_t attach_count(const std::string& ns, const std::string& var)
{
    return Registry().retrieve_metadata(ns, var).attach_count;
}

} // namespace

TEST_CASE("register a matrix and read its metadata")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    Matrix x(10, 10);
    const auto pages = reg.register_variables(ns, {{"X", VariableRef::of_matrix(x)}});
    REQUIRE(pages.size() == 1);
    CHECK(pages[0].meta.type_tag == 2);
    CHECK(pages[0].meta.nrow == 10);
    CHECK(pages[0].meta.ncol == 10);
    CHECK(pages[0].meta.attach_count == 1);

    Matrix m37(3, 7);
    std::vector<double> y9(9, 2.0);
    reg.register_variables(ns, {{"A", VariableRef::of_matrix(m37)}, {"y", VariableRef::of_vector(y9)}});
    const auto a = reg.retrieve_metadata(ns, "A");
    CHECK(a.type_tag == 2);
    CHECK(a.nrow == 3);
    CHECK(a.ncol == 7);
    const auto y = reg.retrieve_metadata(ns, "y");
    CHECK(y.type_tag == 1);
    CHECK(y.nrow == 9);
    CHECK(y.ncol == 1);
    CHECK(code_of([&] { reg.retrieve_metadata(ns, "ghost"); }) == ErrorCode::NotFound);
    reg.shutdown();
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("duplicate and invalid registrations")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> v(4, 1.0);
    reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}});
    CHECK(code_of([&] { reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}}); }) == ErrorCode::AlreadyExists);

    // Another process's live variable blocks the name as well.
    Registry other;
    CHECK(code_of([&] { other.register_variables(ns, {{"X", VariableRef::of_vector(v)}}); }) == ErrorCode::AlreadyExists);

    CHECK(code_of([&] { reg.register_variables(ns, {{"bad name", VariableRef::of_vector(v)}}); }) ==
          ErrorCode::InvalidName);

    // All-or-nothing: the valid entry of a failing batch is not left behind.
    CHECK(code_of([&] {
              reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}, {"Y", VariableRef::of_vector(v)}});
          }) == ErrorCode::AlreadyExists);
    CHECK_FALSE(segment_exists(SegmentName(ns, "Y", SegmentKind::data)));
    CHECK(reg.page_list().size() == 1);
    reg.shutdown();
}

TEST_CASE("views share the page bytes and count")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    Matrix x(100, 100);
    for (auto& v : x.values()) v = n(rng);
    reg.register_variables(ns, {{"X", VariableRef::of_matrix(x)}});

    auto views = reg.retrieve_views(ns, {"X"});
    const auto& view = views.at("X");
    CHECK(view.nrow() == 100);
    CHECK(view.ncol() == 100);
    CHECK(view.kind() == ValueKind::matrix);
    bool equal = true;
    for (std::size_t i = 0; i < x.size(); ++i) equal = equal && view.values()[i] == x.values()[i];
    CHECK(equal);
    CHECK(view(3, 4) == x(3, 4));
    CHECK(attach_count(ns, "X") == 2);

    auto second = reg.retrieve_view(ns, "X");
    CHECK(attach_count(ns, "X") == 3);
    CHECK(reg.view_list().size() == 2);

    CHECK(code_of([&] { reg.retrieve_views(ns, {"ghost"}); }) == ErrorCode::NotFound);
    CHECK(code_of([&] { reg.retrieve_views(ns, {"X", "ghost"}); }) == ErrorCode::NotFound);
    CHECK(attach_count(ns, "X") == 3);

    reg.release_views(ns, {"X", "X"});
    CHECK(reg.view_list().empty());
    CHECK(attach_count(ns, "X") == 1);
    CHECK(code_of([&] { reg.release_views(ns, {"X"}); }) == ErrorCode::NotHeld);
    CHECK(code_of([&] { reg.release_views(ns, {"never"}); }) == ErrorCode::NotHeld);
    reg.release_variables(ns, {"X"});
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("child process reads a registered vector")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> y{1, 2, 3, 4, 5};
    reg.register_variables(ns, {{"y", VariableRef::of_vector(y)}});
    const int rc = testing::in_child([&] {
        Registry child;
        auto v = child.retrieve_view(ns, "y");
        const auto vals = v.values();
        const bool ok = vals.size() == 5 && vals[0] == 1 && vals[1] == 2 && vals[2] == 3 && vals[3] == 4 && vals[4] == 5;
        child.release_views(ns, {"y"});
        return ok ? 0 : 1;
    });
    CHECK(rc == 0);
    CHECK(attach_count(ns, "y") == 1);
    reg.release_variables(ns, {"y"});
}

TEST_CASE("release of a page")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> v(10, 4.0);
    reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}});
    reg.release_variables(ns, {"X"});
    CHECK(code_of([&] { reg.retrieve_view(ns, "X"); }) == ErrorCode::NotFound);
    CHECK(code_of([&] { reg.release_variables(ns, {"X"}); }) == ErrorCode::NotOwned);
    CHECK(code_of([&] { reg.release_variables(ns, {"unknown"}); }) == ErrorCode::NotOwned);
}

TEST_CASE("deferred destruction while another process holds a view")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> v(1000);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}});

    testing::ChildProcess child(testing::helper("shmkit-test-helper"), {"hold", ns, "X"});
    CHECK(child.recv() == "ready 1000");
    CHECK(attach_count(ns, "X") == 2);

    std::vector<std::string> warnings;
    auto previous = shmkit::log::set_sink([&](shmkit::log::Level, std::string_view msg) { warnings.emplace_back(msg); });
    reg.release_variables(ns, {"X"});
    shmkit::log::set_sink(previous);
    CHECK(warnings.size() == 1);
    CHECK(reg.page_list().empty());
    CHECK(segment_exists(SegmentName(ns, "X", SegmentKind::data)));
    CHECK(attach_count(ns, "X") == 1);

    CHECK(child.call("sum") == "sum 499500");
    CHECK(child.call("release") == "released");
    CHECK(child.wait() == 0);
    CHECK_FALSE(segment_exists(SegmentName(ns, "X", SegmentKind::data)));
    CHECK_FALSE(segment_exists(SegmentName(ns, "X", SegmentKind::meta)));
}

TEST_CASE("own view outlives own page release")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> v{7, 8, 9};
    reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}});
    auto view = reg.retrieve_view(ns, "X");
    auto previous = shmkit::log::set_sink([](shmkit::log::Level, std::string_view) {});
    reg.release_variables(ns, {"X"});
    shmkit::log::set_sink(previous);
    CHECK(view.values()[2] == 9);
    reg.release_views(ns, {"X"});
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("page_list and view_list are exact")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    CHECK(reg.page_list().empty());
    CHECK(reg.view_list().empty());
    std::vector<double> v(3, 1.0);
    reg.register_variables(ns, {{"a", VariableRef::of_vector(v)}, {"b", VariableRef::of_vector(v)}});
    reg.retrieve_view(ns, "a");
    CHECK(reg.page_list().size() == 2);
    REQUIRE(reg.view_list().size() == 1);
    CHECK(reg.view_list()[0].variable == "a");
    reg.release_namespace(ns);
    CHECK(reg.page_list().empty());
    CHECK(reg.view_list().empty());
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("lists are flattened to indexed elements")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<Matrix> mats;
    for (int k = 0; k < 3; ++k) mats.emplace_back(2, 2, std::vector<double>(4, k));
    std::vector<VariableRef> refs;
    for (const auto& m : mats) refs.push_back(VariableRef::of_matrix(m));
    reg.register_list(ns, "L", refs);
    CHECK(reg.list_length(ns, "L") == 3u);
    CHECK_FALSE(reg.list_length(ns, "M"));
    auto e2 = reg.retrieve_view(ns, "L.2");
    CHECK(e2.values()[0] == 2.0);
    reg.release_views(ns, {"L.2"});
    reg.release_list(ns, "L");
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("shutdown releases everything but spares external views")
{
    const auto ns = testing::unique_ns("reg");
    auto reg = std::make_unique<Registry>();
    std::vector<double> v(50, 2.0);
    reg->register_variables(ns, {{"kept", VariableRef::of_vector(v)}, {"gone", VariableRef::of_vector(v)}});
    reg->retrieve_view(ns, "gone");
    testing::ChildProcess child(testing::helper("shmkit-test-helper"), {"hold", ns, "kept"});
    REQUIRE(child.recv() == "ready 50");
    auto previous = shmkit::log::set_sink([](shmkit::log::Level, std::string_view) {});
    reg.reset();
    shmkit::log::set_sink(previous);
    CHECK_FALSE(segment_exists(SegmentName(ns, "gone", SegmentKind::data)));
    CHECK(segment_exists(SegmentName(ns, "kept", SegmentKind::data)));
    CHECK(child.call("sum") == "sum 100");
    CHECK(child.call("release") == "released");
    child.wait();
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("conservation of the attach count")
{
    const auto ns = testing::unique_ns("reg");
    Registry reg;
    std::vector<double> v(8, 1.0);
    reg.register_variables(ns, {{"X", VariableRef::of_vector(v)}});
    std::mt19937 rng(5);
    int live = 0;
    bool owner = true;
    for (int step = 0; step < 300; ++step) {
        if (rng() % 2 == 0 || live == 0) {
            reg.retrieve_view(ns, "X");
            ++live;
        } else {
            reg.release_views(ns, {"X"});
            --live;
        }
        if (step == 150) {
            auto previous = shmkit::log::set_sink([](shmkit::log::Level, std::string_view) {});
            reg.release_variables(ns, {"X"});
            shmkit::log::set_sink(previous);
            owner = false;
            if (live == 0) break;
        }
        REQUIRE(attach_count(ns, "X") == static_cast<std::uint64_t>((owner ? 1 : 0) + live));
        if (!owner && live == 0) break;
    }
    while (live-- > 0) reg.release_views(ns, {"X"});
    if (owner) reg.release_variables(ns, {"X"});
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("sweep removes variables held only by dead processes")
{
    const auto ns = testing::unique_ns("reg");
    testing::ChildProcess child(testing::helper("shmkit-test-helper"), {"orphan", ns, "O", "100"});
    REQUIRE(child.recv() == "ready");
    Registry reg;
    reg.retrieve_view(ns, "O");
    CHECK(sweep_orphans(ns).empty()); // owner alive
    child.kill();
    child.wait();
    CHECK(sweep_orphans(ns).empty()); // our view is alive
    reg.release_views(ns, {"O"});
    const auto vars = inspect_variables(ns);
    REQUIRE(vars.size() == 1);
    CHECK(vars[0].owner_present);
    const auto swept = sweep_orphans(ns);
    REQUIRE(swept.size() == 1);
    CHECK(swept[0].variable == "O");
    CHECK(testing::live_segments(ns) == 0);
}

TEST_CASE("process liveness")
{
    CHECK(process_alive(static_cast<std::uint32_t>(::getpid())));
    const pid_t pid = ::fork();
    if (pid == 0) ::_exit(0);
    ::usleep(50000);
    CHECK_FALSE(process_alive(static_cast<std::uint32_t>(pid))); // zombie
    ::waitpid(pid, nullptr, 0);
    CHECK_FALSE(process_alive(static_cast<std::uint32_t>(pid)));
}
