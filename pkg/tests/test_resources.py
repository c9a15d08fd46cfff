import pytest
from hypothesis import given, strategies as st

from smsim.resources import (
    GpuConfig,
    KernelDescriptor,
    ResourceVector,
    block_demand,
    classify_kernel,
    limiting_resource,
    max_resident_blocks_per_sm,
)

GPU = GpuConfig()


def kernel(grid=1, threads=64, regs=0, smem=0.0, duration=100.0, name="k"):
    return KernelDescriptor(
        name=name,
        grid_blocks=grid,
        threads_per_block=threads,
        regs_per_thread=regs,
        shared_mem_per_block=smem,
        isolated_duration=duration,
    )


class TestDefaults:
    def test_device_limits(self):
        assert GPU.num_sms == 82
        assert GPU.threads_per_sm == 1536
        assert GPU.blocks_per_sm == 16
        assert GPU.registers_per_sm == 65536
        assert GPU.mem_bandwidth == 936.0
        assert GPU.l2_cache == 6144.0
        assert GPU.global_mem == 24576.0

    def test_all_fields_positive_enforced(self):
        with pytest.raises(ValueError):
            GpuConfig(num_sms=0)
        with pytest.raises(ValueError):
            GpuConfig(mem_bandwidth=-1)


class TestBlockDemand:
    def test_training_conv_shape(self):
        # 256 threads at 32 regs/thread
        d = block_demand(kernel(threads=256, regs=32))
        assert (d.threads, d.blocks, d.registers, d.shared_mem) == (256, 1, 8192, 0.0)

    def test_inference_gemm_shape(self):
        # 64 threads at 80 regs/thread
        d = block_demand(kernel(threads=64, regs=80))
        assert (d.threads, d.blocks, d.registers, d.shared_mem) == (64, 1, 5120, 0.0)

    def test_unit_kernel(self):
        d = block_demand(kernel(threads=1, regs=1))
        assert (d.threads, d.blocks, d.registers, d.shared_mem) == (1, 1, 1, 0.0)


class TestMaxResident:
    def test_thread_limited_training_kernel(self):
        assert max_resident_blocks_per_sm(kernel(threads=256, regs=32), GPU) == 6

    def test_register_limited_kernel(self):
        # floors: threads 1536/64=24, blocks 16, regs 65536/5120=12
        assert max_resident_blocks_per_sm(kernel(threads=64, regs=80), GPU) == 12

    def test_block_slot_limited(self):
        assert max_resident_blocks_per_sm(kernel(threads=1, regs=1), GPU) == 16

    def test_invalid_block_rejected(self):
        too_much_smem = kernel(smem=2048.0)
        with pytest.raises(ValueError):
            max_resident_blocks_per_sm(too_much_smem, GPU)

    @given(
        threads=st.integers(1, 1024),
        regs=st.integers(0, 64),
        smem=st.floats(0.0, 1024.0, allow_nan=False),
    )
    def test_bounds(self, threads, regs, smem):
        k = kernel(threads=threads, regs=regs, smem=smem)
        if threads * regs > GPU.registers_per_sm:
            return  # invalid per-block demand
        n = max_resident_blocks_per_sm(k, GPU)
        assert 1 <= n <= GPU.blocks_per_sm

    @given(
        threads=st.sampled_from([32, 64, 128, 256]),
        regs=st.integers(1, 32),
        scale=st.integers(1, 4),
    )
    def test_scaling_demand_and_limit_together(self, threads, regs, scale):
        k = kernel(threads=threads, regs=regs)
        base = max_resident_blocks_per_sm(k, GPU)
        scaled_gpu = GpuConfig(registers_per_sm=GPU.registers_per_sm * scale)
        scaled_k = kernel(threads=threads, regs=regs * scale)
        assert max_resident_blocks_per_sm(scaled_k, scaled_gpu) == base


class TestLimitingResource:
    def test_threads_limit(self):
        assert limiting_resource(kernel(threads=256, regs=32), GPU) == "threads"

    def test_registers_limit(self):
        assert limiting_resource(kernel(threads=64, regs=80), GPU) == "registers"

    def test_block_slots_limit(self):
        assert limiting_resource(kernel(threads=1, regs=1), GPU) == "blocks"

    def test_tie_break_order_prefers_threads(self):
        # 96 threads/block: 1536/96 = 16 exactly ties the block-slot cap
        assert limiting_resource(kernel(threads=96), GPU) == "threads"

    @given(
        threads=st.integers(1, 1024),
        regs=st.integers(0, 50),
        smem=st.sampled_from([0.0, 16.0, 100.0]),
    )
    def test_limiting_floor_matches_max_resident(self, threads, regs, smem):
        import math

        k = kernel(threads=threads, regs=regs, smem=smem)
        demand = block_demand(k)
        if not demand.fits_within(GPU.sm_limits):
            return
        cap = max_resident_blocks_per_sm(k, GPU)
        kind = limiting_resource(k, GPU)
        need = demand.get(kind)
        assert need > 0
        assert math.floor(GPU.sm_limits.get(kind) / need) == cap


class TestClassify:
    def test_large_training_kernel(self):
        k = kernel(grid=200704, threads=256, regs=32, duration=5000.0)
        assert classify_kernel(k, GPU) == {"large": True, "long_running": True}

    def test_small_short_kernel(self):
        k = kernel(grid=32, threads=64, duration=137.0)
        assert classify_kernel(k, GPU) == {"large": False, "long_running": False}

    def test_long_running_boundary_is_strict(self):
        k = kernel(grid=1, threads=1, duration=1000.0)
        assert classify_kernel(k, GPU)["long_running"] is False
        k2 = kernel(grid=1, threads=1, duration=1000.0001)
        assert classify_kernel(k2, GPU)["long_running"] is True

    def test_large_boundary(self):
        # capacity for the 256-thread training shape: 82 * 6 = 492
        at = kernel(grid=492, threads=256, regs=32)
        over = kernel(grid=493, threads=256, regs=32)
        assert classify_kernel(at, GPU)["large"] is False
        assert classify_kernel(over, GPU)["large"] is True

    @given(
        grid_a=st.integers(1, 4000),
        grid_b=st.integers(1, 4000),
        threads=st.sampled_from([64, 128, 256]),
    )
    def test_large_monotone_in_grid(self, grid_a, grid_b, threads):
        lo, hi = sorted([grid_a, grid_b])
        k_lo = kernel(grid=lo, threads=threads)
        k_hi = kernel(grid=hi, threads=threads)
        if classify_kernel(k_lo, GPU)["large"]:
            assert classify_kernel(k_hi, GPU)["large"]


class TestResourceVector:
    def test_componentwise_arithmetic(self):
        a = ResourceVector(10, 2, 100, 5.0)
        b = ResourceVector(3, 1, 50, 1.5)
        assert a + b == ResourceVector(13, 3, 150, 6.5)
        assert a - b == ResourceVector(7, 1, 50, 3.5)

    def test_fits_within(self):
        assert ResourceVector(1, 1, 1, 0.0).fits_within(ResourceVector(1, 1, 1, 0.0))
        assert not ResourceVector(2, 1, 1, 0.0).fits_within(ResourceVector(1, 8, 8, 8.0))

    @given(
        vals=st.lists(
            st.tuples(
                st.integers(0, 1000), st.integers(0, 16),
                st.integers(0, 65536),
                # dyadic sizes add and subtract exactly
                st.sampled_from([0.0, 0.5, 8.0, 64.0, 1024.0]),
            ),
            min_size=2, max_size=2,
        )
    )
    def test_add_then_subtract_roundtrip(self, vals):
        a = ResourceVector(*vals[0])
        b = ResourceVector(*vals[1])
        assert (a + b) - b == a
